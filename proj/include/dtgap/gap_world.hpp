#pragma once

#include <array>
#include <filesystem>
#include <string>

#include "dtgap/seeding.hpp"
#include "dtgap/truss.hpp"

namespace dtgap {

// Independent normal contributions to the reality gap at one sensor.
enum class GapFactor : std::size_t { SensorDrift = 0, Environment = 1, Interaction = 2 };
inline constexpr std::size_t kFactorCount = 3;

struct NormalParams {
  double mean = 0.0;  // m
  double std = 0.0;   // m

  bool operator==(const NormalParams&) const = default;
};

struct GapInjectionSpec {
  // sensors[j][factor]
  std::array<std::array<NormalParams, kFactorCount>, kSensorCount> sensors{};
  Seed seed = 0;

  void validate() const;
  std::string to_json() const;
  static GapInjectionSpec from_json(const std::string& text);
  static GapInjectionSpec load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  bool operator==(const GapInjectionSpec&) const = default;
};

// Default magnitudes: every mean ~ U[-5e-4, 5e-4] m and every std
// ~ U[1e-4, 5e-4] m, drawn once from `meta_seed`.
GapInjectionSpec default_gap_spec(Seed meta_seed);

struct WorldInstance {
  AssetConfiguration config;
  SensorVector virtual_readings;
  SensorVector physical;
  // draws[j][factor]; test oracles only, never handed to the RGA side.
  std::array<std::array<double, kFactorCount>, kSensorCount> draws{};
};

// physical[j] = ((virtual[j] + drift[j]) + environment[j]) + interaction[j].
// Draw order is factor-major (all 42 drift draws, then environment, then
// interaction), each draw being mean + std * z with z ~ N(0, 1).
WorldInstance observe(const TrussModel& model, const AssetConfiguration& config,
                      const GapInjectionSpec& spec, Rng& rng);

struct GapMoments {
  double mean = 0.0;
  double variance = 0.0;
};

// Closed-form moments of the summed gap per sensor.
std::array<GapMoments, kSensorCount> total_gap_distribution(const GapInjectionSpec& spec);

}  // namespace dtgap
