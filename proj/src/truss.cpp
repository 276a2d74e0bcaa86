#include "dtgap/truss.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <sstream>
#include <thread>

#include "dtgap/error.hpp"

namespace dtgap {

std::string to_string(Domain d) {
  switch (d) {
    case Domain::Virtual: return "virtual";
    case Domain::Physical: return "physical";
    case Domain::Detached: return "detached";
  }
  return "virtual";
}

Domain domain_from_string(const std::string& s) {
  if (s == "virtual") return Domain::Virtual;
  if (s == "physical") return Domain::Physical;
  if (s == "detached") return Domain::Detached;
  throw ArgumentError("unknown sensor domain '" + s + "'");
}

std::array<double, kConfigDim> AssetConfiguration::to_array() const {
  std::array<double, kConfigDim> v{};
  std::copy(health.begin(), health.end(), v.begin());
  v[kGroupCount] = load_magnitude;
  v[kGroupCount + 1] = static_cast<double>(load_position);
  v[kGroupCount + 2] = temperature;
  return v;
}

AssetConfiguration AssetConfiguration::from_array(const std::array<double, kConfigDim>& v) {
  AssetConfiguration c;
  std::copy(v.begin(), v.begin() + kGroupCount, c.health.begin());
  c.load_magnitude = v[kGroupCount];
  c.load_position = static_cast<int>(std::lround(v[kGroupCount + 1]));
  c.temperature = v[kGroupCount + 2];
  return c;
}

AssetConfiguration ConfigBounds::clamp(const std::array<double, kConfigDim>& raw) const {
  std::array<double, kConfigDim> v{};
  for (std::size_t i = 0; i < kConfigDim; ++i) v[i] = std::clamp(raw[i], lo[i], hi[i]);
  return AssetConfiguration::from_array(v);
}

// ---------------------------------------------------------------------------
// Structure-config file

namespace {

using Setter = std::function<void(StructureParams&, double)>;

const std::map<std::string, Setter>& param_setters() {
  static const std::map<std::string, Setter> setters = {
      {"version", [](StructureParams& p, double v) { p.version = static_cast<int>(v); }},
      {"bays", [](StructureParams& p, double v) { p.bays = static_cast<int>(v); }},
      {"bay_length_m", [](StructureParams& p, double v) { p.bay_length = v; }},
      {"height_m", [](StructureParams& p, double v) { p.height = v; }},
      {"youngs_modulus_pa", [](StructureParams& p, double v) { p.youngs_modulus = v; }},
      {"area_bottom_chord_m2", [](StructureParams& p, double v) { p.area_bottom_chord = v; }},
      {"area_top_chord_m2", [](StructureParams& p, double v) { p.area_top_chord = v; }},
      {"area_vertical_m2", [](StructureParams& p, double v) { p.area_vertical = v; }},
      {"area_diagonal_m2", [](StructureParams& p, double v) { p.area_diagonal = v; }},
      {"thermal_alpha_per_c", [](StructureParams& p, double v) { p.thermal_alpha = v; }},
      {"reference_temperature_c", [](StructureParams& p, double v) { p.reference_temperature = v; }},
      {"temperature_min_c", [](StructureParams& p, double v) { p.temperature_min = v; }},
      {"temperature_max_c", [](StructureParams& p, double v) { p.temperature_max = v; }},
      {"health_floor", [](StructureParams& p, double v) { p.health_floor = v; }},
      {"reference_load_n", [](StructureParams& p, double v) { p.reference_load = v; }},
      {"sample_health_min", [](StructureParams& p, double v) { p.sample_health_min = v; }},
      {"sample_load_mean_n", [](StructureParams& p, double v) { p.sample_load_mean = v; }},
      {"sample_load_std_n", [](StructureParams& p, double v) { p.sample_load_std = v; }},
      {"sample_load_min_n", [](StructureParams& p, double v) { p.sample_load_min = v; }},
      {"sample_load_max_n", [](StructureParams& p, double v) { p.sample_load_max = v; }},
  };
  return setters;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

StructureParams StructureParams::parse(const std::string& text) {
  StructureParams p;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  bool saw_version = false;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw SchemaError("structure config line " + std::to_string(lineno) + ": expected key = value",
                        lineno);
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    const auto it = param_setters().find(key);
    if (it == param_setters().end())
      throw SchemaError("structure config line " + std::to_string(lineno) + ": unknown key '" + key + "'",
                        lineno);
    double v = 0.0;
    try {
      std::size_t used = 0;
      v = std::stod(value, &used);
      if (used != value.size()) throw std::invalid_argument(value);
    } catch (const std::exception&) {
      throw SchemaError("structure config line " + std::to_string(lineno) + ": bad number '" + value + "'",
                        lineno);
    }
    it->second(p, v);
    if (key == "version") saw_version = true;
  }
  if (!saw_version) throw SchemaError("structure config: missing 'version'");
  if (p.version != 1)
    throw SchemaError("structure config: unsupported version " + std::to_string(p.version));
  if (p.bays < 2) throw SchemaError("structure config: need at least 2 bays");
  return p;
}

StructureParams StructureParams::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ArgumentError("cannot open structure config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

std::string StructureParams::serialize() const {
  std::ostringstream out;
  out.precision(17);
  out << "version = " << version << "\n"
      << "bays = " << bays << "\n"
      << "bay_length_m = " << bay_length << "\n"
      << "height_m = " << height << "\n"
      << "youngs_modulus_pa = " << youngs_modulus << "\n"
      << "area_bottom_chord_m2 = " << area_bottom_chord << "\n"
      << "area_top_chord_m2 = " << area_top_chord << "\n"
      << "area_vertical_m2 = " << area_vertical << "\n"
      << "area_diagonal_m2 = " << area_diagonal << "\n"
      << "thermal_alpha_per_c = " << thermal_alpha << "\n"
      << "reference_temperature_c = " << reference_temperature << "\n"
      << "temperature_min_c = " << temperature_min << "\n"
      << "temperature_max_c = " << temperature_max << "\n"
      << "health_floor = " << health_floor << "\n"
      << "reference_load_n = " << reference_load << "\n"
      << "sample_health_min = " << sample_health_min << "\n"
      << "sample_load_mean_n = " << sample_load_mean << "\n"
      << "sample_load_std_n = " << sample_load_std << "\n"
      << "sample_load_min_n = " << sample_load_min << "\n"
      << "sample_load_max_n = " << sample_load_max << "\n";
  return out.str();
}

// ---------------------------------------------------------------------------
// Model

TrussModel::TrussModel(std::vector<TrussNode> nodes, std::vector<TrussMember> members,
                       std::vector<std::size_t> restrained_dofs, std::vector<std::size_t> sensor_dofs,
                       std::vector<std::size_t> deck_nodes, double thermal_alpha,
                       double reference_temperature, ConfigBounds bounds)
    : nodes_(std::move(nodes)),
      members_(std::move(members)),
      sensor_dofs_(std::move(sensor_dofs)),
      deck_nodes_(std::move(deck_nodes)),
      thermal_alpha_(thermal_alpha),
      reference_temperature_(reference_temperature),
      bounds_(bounds) {
  const std::size_t ndof = dof_count();
  std::vector<bool> restrained(ndof, false);
  for (std::size_t d : restrained_dofs) {
    if (d >= ndof) throw ArgumentError("restrained DOF out of range");
    restrained[d] = true;
  }
  reduced_index_.assign(ndof, npos);
  for (std::size_t d = 0; d < ndof; ++d) {
    if (!restrained[d]) {
      reduced_index_[d] = free_dofs_.size();
      free_dofs_.push_back(d);
    }
  }
  for (const auto& m : members_) {
    if (m.a >= nodes_.size() || m.b >= nodes_.size() || m.a == m.b)
      throw ArgumentError("member references invalid nodes");
    if (m.group >= kGroupCount) throw ArgumentError("member group out of range");
    if (!(m.area > 0.0) || !(m.youngs_modulus > 0.0))
      throw ArgumentError("member area and modulus must be positive");
  }
  for (std::size_t d : sensor_dofs_) {
    if (d >= ndof || restrained[d]) throw ArgumentError("sensor must sit on a free DOF");
  }
  for (std::size_t n : deck_nodes_) {
    if (n >= nodes_.size()) throw ArgumentError("deck node out of range");
  }
}

TrussModel TrussModel::pratt_bridge(const StructureParams& p) {
  const auto bays = static_cast<std::size_t>(p.bays);
  const auto top = [bays](std::size_t i) { return bays + 1 + i; };

  std::vector<TrussNode> nodes;
  for (std::size_t i = 0; i <= bays; ++i) nodes.push_back({static_cast<double>(i) * p.bay_length, 0.0});
  for (std::size_t i = 0; i <= bays; ++i) nodes.push_back({static_cast<double>(i) * p.bay_length, p.height});

  const double E = p.youngs_modulus;
  std::vector<TrussMember> members;
  const auto add = [&](std::size_t a, std::size_t b, double area, MemberGroup g) {
    members.push_back({a, b, area, E, static_cast<std::size_t>(g)});
  };
  for (std::size_t i = 0; i < bays; ++i) add(i, i + 1, p.area_bottom_chord, MemberGroup::BottomChord);
  for (std::size_t i = 0; i < bays; ++i) add(top(i), top(i + 1), p.area_top_chord, MemberGroup::TopChord);
  for (std::size_t i = 0; i <= bays; ++i) add(i, top(i), p.area_vertical, MemberGroup::Vertical);
  // Diagonals slope down toward midspan. With an odd bay count the centre
  // bay is cross-braced so the structure stays mirror-symmetric.
  const std::size_t last_left = (bays - 1) / 2;
  const std::size_t first_right = bays / 2;
  for (std::size_t b = 0; b <= last_left; ++b) add(top(b), b + 1, p.area_diagonal, MemberGroup::LeftDiagonal);
  for (std::size_t b = first_right; b < bays; ++b) add(b, top(b + 1), p.area_diagonal, MemberGroup::RightDiagonal);

  // Pin at bottom-left, roller (vertical restraint) at bottom-right.
  std::vector<std::size_t> restrained = {0, 1, 2 * bays + 1};

  std::vector<std::size_t> sensors;
  for (std::size_t n = 0; n < nodes.size(); ++n) {
    const std::size_t vy = 2 * n + 1;
    if (std::find(restrained.begin(), restrained.end(), vy) == restrained.end()) sensors.push_back(vy);
  }
  if (sensors.size() != kSensorCount)
    throw ArgumentError("bridge geometry yields " + std::to_string(sensors.size()) + " sensed DOFs, expected " +
                        std::to_string(kSensorCount));

  std::vector<std::size_t> deck;
  for (std::size_t i = 0; i <= bays; ++i) deck.push_back(i);

  ConfigBounds bounds;
  for (std::size_t g = 0; g < kGroupCount; ++g) {
    bounds.lo[g] = p.health_floor;
    bounds.hi[g] = 1.0;
  }
  bounds.lo[kGroupCount] = 0.0;
  bounds.hi[kGroupCount] = std::numeric_limits<double>::max();
  bounds.lo[kGroupCount + 1] = 0.0;
  bounds.hi[kGroupCount + 1] = static_cast<double>(bays - 1);
  bounds.lo[kGroupCount + 2] = p.temperature_min;
  bounds.hi[kGroupCount + 2] = p.temperature_max;

  return TrussModel(std::move(nodes), std::move(members), std::move(restrained), std::move(sensors),
                    std::move(deck), p.thermal_alpha, p.reference_temperature, bounds);
}

void TrussModel::validate(const AssetConfiguration& c) const {
  for (std::size_t g = 0; g < kGroupCount; ++g) {
    if (!(c.health[g] > 0.0 && c.health[g] <= 1.0))
      throw ArgumentError("health of group " + std::to_string(g) + " outside (0, 1]");
  }
  if (!(c.load_magnitude >= 0.0) || !std::isfinite(c.load_magnitude))
    throw ArgumentError("load magnitude must be finite and non-negative");
  if (c.load_magnitude > 0.0 && (c.load_position < 0 || c.load_position >= bay_count()))
    throw ArgumentError("load position " + std::to_string(c.load_position) + " is not a deck bay");
  const double tlo = bounds_.lo[kGroupCount + 2];
  const double thi = bounds_.hi[kGroupCount + 2];
  if (!(c.temperature >= tlo && c.temperature <= thi))
    throw ArgumentError("temperature outside operating range");
}

// ---------------------------------------------------------------------------
// Direct stiffness method

double member_axial_stiffness(const TrussModel& model, const TrussMember& m, const AssetConfiguration& c) {
  const auto& a = model.nodes()[m.a];
  const auto& b = model.nodes()[m.b];
  const double length = std::hypot(b.x - a.x, b.y - a.y);
  const double thermal = 1.0 - model.thermal_alpha() * (c.temperature - model.reference_temperature());
  return m.youngs_modulus * thermal * c.health[m.group] * m.area / length;
}

namespace {

Eigen::MatrixXd assemble_unchecked(const TrussModel& model, const AssetConfiguration& config) {
  const std::size_t n = model.free_dof_count();
  Eigen::MatrixXd K = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
  for (const auto& m : model.members()) {
    const auto& na = model.nodes()[m.a];
    const auto& nb = model.nodes()[m.b];
    const double dx = nb.x - na.x;
    const double dy = nb.y - na.y;
    const double length = std::hypot(dx, dy);
    const double c = dx / length;
    const double s = dy / length;
    const double k = member_axial_stiffness(model, m, config);
    const std::array<double, 4> dir = {-c, -s, c, s};
    const std::array<std::size_t, 4> dofs = {2 * m.a, 2 * m.a + 1, 2 * m.b, 2 * m.b + 1};
    for (std::size_t i = 0; i < 4; ++i) {
      const std::size_t ri = model.reduced_index(dofs[i]);
      if (ri == TrussModel::npos) continue;
      for (std::size_t j = 0; j < 4; ++j) {
        const std::size_t rj = model.reduced_index(dofs[j]);
        if (rj == TrussModel::npos) continue;
        K(static_cast<Eigen::Index>(ri), static_cast<Eigen::Index>(rj)) += k * (dir[i] * dir[j]);
      }
    }
  }
  return K;
}

std::size_t rank_deficiency(const Eigen::MatrixXd& K) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(K, Eigen::EigenvaluesOnly);
  const auto& ev = eig.eigenvalues();
  const double scale = std::max(ev.cwiseAbs().maxCoeff(), std::numeric_limits<double>::min());
  std::size_t deficient = 0;
  for (Eigen::Index i = 0; i < ev.size(); ++i) {
    if (ev[i] <= 1e-12 * scale) ++deficient;
  }
  return std::max<std::size_t>(deficient, 1);
}

Eigen::LLT<Eigen::MatrixXd> factorize(const Eigen::MatrixXd& K) {
  Eigen::LLT<Eigen::MatrixXd> llt(K);
  bool ok = llt.info() == Eigen::Success;
  if (ok && K.rows() > 0) {
    const Eigen::VectorXd pivots = llt.matrixLLT().diagonal().array().square();
    ok = pivots.minCoeff() > 1e-12 * pivots.maxCoeff();
  }
  if (!ok) {
    const std::size_t d = rank_deficiency(K);
    throw UnstableStructure("unstable structure: reduced stiffness is rank deficient by " + std::to_string(d), d);
  }
  return llt;
}

}  // namespace

Eigen::MatrixXd assemble_stiffness(const TrussModel& model, const AssetConfiguration& config) {
  model.validate(config);
  Eigen::MatrixXd K = assemble_unchecked(model, config);
  factorize(K);
  return K;
}

Eigen::VectorXd deck_load(const TrussModel& model, const AssetConfiguration& config) {
  Eigen::VectorXd f = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(model.dof_count()));
  if (config.load_magnitude == 0.0 || model.deck_nodes().size() < 2) return f;
  const auto bay = static_cast<std::size_t>(config.load_position);
  const double half = 0.5 * config.load_magnitude;
  f[static_cast<Eigen::Index>(2 * model.deck_nodes()[bay] + 1)] -= half;
  f[static_cast<Eigen::Index>(2 * model.deck_nodes()[bay + 1] + 1)] -= half;
  return f;
}

Eigen::VectorXd solve_displacements(const TrussModel& model, const AssetConfiguration& config,
                                    const Eigen::VectorXd& forces) {
  model.validate(config);
  const Eigen::MatrixXd K = assemble_unchecked(model, config);
  const auto llt = factorize(K);
  Eigen::VectorXd f(static_cast<Eigen::Index>(model.free_dof_count()));
  for (std::size_t r = 0; r < model.free_dof_count(); ++r)
    f[static_cast<Eigen::Index>(r)] = forces[static_cast<Eigen::Index>(model.free_dofs()[r])];
  const Eigen::VectorXd ur = llt.solve(f);
  Eigen::VectorXd u = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(model.dof_count()));
  for (std::size_t r = 0; r < model.free_dof_count(); ++r)
    u[static_cast<Eigen::Index>(model.free_dofs()[r])] = ur[static_cast<Eigen::Index>(r)];
  return u;
}

SensorVector simulate(const TrussModel& model, const AssetConfiguration& config) {
  if (model.sensor_dofs().size() != kSensorCount)
    throw ArgumentError("model must expose exactly 42 sensors");
  SensorVector out;
  out.domain = Domain::Virtual;
  if (config.load_magnitude == 0.0) {
    model.validate(config);
    // Homogeneous system; still reject unstable structures.
    factorize(assemble_unchecked(model, config));
    return out;
  }
  const Eigen::VectorXd u = solve_displacements(model, config, deck_load(model, config));
  for (std::size_t i = 0; i < kSensorCount; ++i) {
    const double v = -u[static_cast<Eigen::Index>(model.sensor_dofs()[i])];
    out.values[i] = v == 0.0 ? 0.0 : v;
  }
  return out;
}

std::vector<SensorVector> simulate_batch(const TrussModel& model, std::span<const AssetConfiguration> configs,
                                         unsigned jobs) {
  for (std::size_t i = 0; i < configs.size(); ++i) {
    try {
      model.validate(configs[i]);
    } catch (const ArgumentError& e) {
      throw ArgumentError("config " + std::to_string(i) + ": " + e.what());
    }
  }
  std::vector<SensorVector> out(configs.size());
  const auto work = [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) out[i] = simulate(model, configs[i]);
  };
  jobs = std::max(1u, std::min<unsigned>(jobs, static_cast<unsigned>(std::max<std::size_t>(configs.size(), 1))));
  if (jobs == 1) {
    work(0, configs.size());
    return out;
  }
  std::vector<std::thread> threads;
  const std::size_t chunk = (configs.size() + jobs - 1) / jobs;
  for (unsigned t = 0; t < jobs; ++t) {
    const std::size_t b = t * chunk;
    const std::size_t e = std::min(configs.size(), b + chunk);
    if (b < e) threads.emplace_back(work, b, e);
  }
  for (auto& th : threads) th.join();
  return out;
}

AssetConfiguration sample_configuration(const StructureParams& p, Rng& rng) {
  AssetConfiguration c;
  std::uniform_real_distribution<double> health(p.sample_health_min, 1.0);
  for (auto& h : c.health) h = health(rng);
  std::normal_distribution<double> load(p.sample_load_mean, p.sample_load_std);
  do {
    c.load_magnitude = load(rng);
  } while (c.load_magnitude < p.sample_load_min || c.load_magnitude > p.sample_load_max);
  std::uniform_int_distribution<int> bay(0, p.bays - 1);
  c.load_position = bay(rng);
  std::uniform_real_distribution<double> temp(p.temperature_min, p.temperature_max);
  c.temperature = temp(rng);
  return c;
}

std::vector<AssetConfiguration> sample_configurations(const StructureParams& params, std::size_t count,
                                                      Seed seed) {
  Rng rng = make_rng(seed);
  std::vector<AssetConfiguration> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(sample_configuration(params, rng));
  return out;
}

}  // namespace dtgap
