#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "dtgap/seeding.hpp"

namespace dtgap {

inline constexpr std::size_t kSensorCount = 42;
inline constexpr std::size_t kGroupCount = 5;
// health[5], load magnitude, load position, temperature
inline constexpr std::size_t kConfigDim = kGroupCount + 3;

enum class MemberGroup : std::size_t {
  BottomChord = 0,
  TopChord = 1,
  Vertical = 2,
  LeftDiagonal = 3,
  RightDiagonal = 4,
};

enum class Domain { Virtual, Physical, Detached };

std::string to_string(Domain d);
Domain domain_from_string(const std::string& s);

// Sensor readings are downward deflections in meters (positive = sagging),
// ordered by the model's sensor map.
struct SensorVector {
  std::array<double, kSensorCount> values{};
  Domain domain = Domain::Virtual;

  bool operator==(const SensorVector&) const = default;
};

struct AssetConfiguration {
  std::array<double, kGroupCount> health{1.0, 1.0, 1.0, 1.0, 1.0};
  double load_magnitude = 0.0;  // N, acting downward
  int load_position = 0;        // deck bay index
  double temperature = 20.0;    // degrees C

  std::array<double, kConfigDim> to_array() const;
  static AssetConfiguration from_array(const std::array<double, kConfigDim>& v);

  bool operator==(const AssetConfiguration&) const = default;
};

// Closed per-field box used for validation and for clamping predictions.
struct ConfigBounds {
  std::array<double, kConfigDim> lo{};
  std::array<double, kConfigDim> hi{};

  AssetConfiguration clamp(const std::array<double, kConfigDim>& raw) const;
};

// Contents of the versioned structure-config file. See
// config/structure.cfg for the documented schema and default values.
struct StructureParams {
  int version = 1;
  int bays = 21;
  double bay_length = 3.0;
  double height = 4.0;
  double youngs_modulus = 2.0e11;
  double area_bottom_chord = 0.012;
  double area_top_chord = 0.012;
  double area_vertical = 0.004;
  double area_diagonal = 0.004;
  double thermal_alpha = 3.0e-4;       // relative modulus loss per degree C
  double reference_temperature = 20.0;
  double temperature_min = -10.0;
  double temperature_max = 40.0;
  double health_floor = 0.05;          // smallest admissible health factor
  double reference_load = 3.0e4;       // N
  // Sampler for design-phase configurations.
  double sample_health_min = 0.5;
  double sample_load_mean = 3.0e4;
  double sample_load_std = 2.4e4;
  double sample_load_min = 0.0;
  double sample_load_max = 1.26e5;

  static StructureParams parse(const std::string& text);
  static StructureParams load(const std::filesystem::path& path);
  std::string serialize() const;
};

struct TrussNode {
  double x = 0.0;
  double y = 0.0;
};

struct TrussMember {
  std::size_t a = 0;
  std::size_t b = 0;
  double area = 0.0;
  double youngs_modulus = 0.0;
  std::size_t group = 0;
};

// A pinned planar truss. Degrees of freedom are numbered 2*node (x) and
// 2*node+1 (y). Sensors are DOF indices; for the bridge they are the
// vertical DOFs of the 42 free nodes.
class TrussModel {
 public:
  TrussModel(std::vector<TrussNode> nodes, std::vector<TrussMember> members,
             std::vector<std::size_t> restrained_dofs, std::vector<std::size_t> sensor_dofs,
             std::vector<std::size_t> deck_nodes, double thermal_alpha,
             double reference_temperature, ConfigBounds bounds);

  static TrussModel pratt_bridge(const StructureParams& params);

  const std::vector<TrussNode>& nodes() const { return nodes_; }
  const std::vector<TrussMember>& members() const { return members_; }
  const std::vector<std::size_t>& sensor_dofs() const { return sensor_dofs_; }
  const std::vector<std::size_t>& deck_nodes() const { return deck_nodes_; }
  const ConfigBounds& bounds() const { return bounds_; }
  double thermal_alpha() const { return thermal_alpha_; }
  double reference_temperature() const { return reference_temperature_; }

  std::size_t dof_count() const { return 2 * nodes_.size(); }
  std::size_t free_dof_count() const { return free_dofs_.size(); }
  const std::vector<std::size_t>& free_dofs() const { return free_dofs_; }
  // Position of a global DOF in the reduced system, or npos when restrained.
  std::size_t reduced_index(std::size_t dof) const { return reduced_index_[dof]; }
  int bay_count() const { return deck_nodes_.empty() ? 0 : static_cast<int>(deck_nodes_.size()) - 1; }

  // Throws ArgumentError when the configuration violates its invariants.
  void validate(const AssetConfiguration& config) const;

  static constexpr std::size_t npos = static_cast<std::size_t>(-1);

 private:
  std::vector<TrussNode> nodes_;
  std::vector<TrussMember> members_;
  std::vector<std::size_t> sensor_dofs_;
  std::vector<std::size_t> deck_nodes_;
  std::vector<std::size_t> free_dofs_;
  std::vector<std::size_t> reduced_index_;
  double thermal_alpha_;
  double reference_temperature_;
  ConfigBounds bounds_;
};

// Axial stiffness E*A/L of one member after health and thermal scaling.
double member_axial_stiffness(const TrussModel& model, const TrussMember& member,
                              const AssetConfiguration& config);

// Stiffness over free DOFs. Throws UnstableStructure when the matrix is
// singular or indefinite.
Eigen::MatrixXd assemble_stiffness(const TrussModel& model, const AssetConfiguration& config);

// Full-length nodal force vector of the deck load: the load on bay b is
// shared equally by deck nodes b and b+1.
Eigen::VectorXd deck_load(const TrussModel& model, const AssetConfiguration& config);

// Full-length displacement vector (restrained DOFs are zero).
Eigen::VectorXd solve_displacements(const TrussModel& model, const AssetConfiguration& config,
                                    const Eigen::VectorXd& forces);

SensorVector simulate(const TrussModel& model, const AssetConfiguration& config);

// Order-preserving; `jobs` > 1 splits the work over threads.
std::vector<SensorVector> simulate_batch(const TrussModel& model,
                                         std::span<const AssetConfiguration> configs,
                                         unsigned jobs = 1);

// Design-phase configuration sampler: health uniform in
// [sample_health_min, 1], load normal(mean, std) truncated to
// [sample_load_min, sample_load_max], bay uniform, temperature uniform over
// the operating range.
AssetConfiguration sample_configuration(const StructureParams& params, Rng& rng);
std::vector<AssetConfiguration> sample_configurations(const StructureParams& params,
                                                      std::size_t count, Seed seed);

}  // namespace dtgap
