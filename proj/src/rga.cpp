#include "dtgap/rga.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include <json.hpp>

#include "dtgap/error.hpp"

namespace dtgap {

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

double normal_pdf(double x) { return std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi); }

double normal_quantile(double p) {
  if (!(p > 0.0 && p < 1.0)) throw ArgumentError("normal_quantile: p must lie in (0, 1)");
  double x = 0.0;
  for (int i = 0; i < 100; ++i) {
    const double step = (normal_cdf(x) - p) / normal_pdf(x);
    x -= std::clamp(step, -1.0, 1.0);
    if (std::abs(step) < 1e-15) break;
  }
  return x;
}

ResidualPool compute_residuals(std::span<const DeployedObservation> instances, const TrussModel& model) {
  if (instances.empty()) throw ArgumentError("compute_residuals: no instances");
  ResidualPool pool;
  for (auto& r : pool.residuals) r.reserve(instances.size());
  for (std::size_t i = 0; i < instances.size(); ++i) {
    SensorVector v;
    try {
      v = simulate(model, instances[i].predicted);
    } catch (const Error& e) {
      throw Error("compute_residuals: instance " + std::to_string(i) + ": " + e.what());
    }
    for (std::size_t j = 0; j < kSensorCount; ++j) {
      const double r = instances[i].physical.values[j] - v.values[j];
      if (!std::isfinite(r)) throw ArgumentError("compute_residuals: non-finite residual at instance " + std::to_string(i));
      pool.residuals[j].push_back(r);
    }
  }
  return pool;
}

TrimmedMoments trimmed_moments(std::vector<double> values, double trim_fraction) {
  const std::size_t n = values.size();
  const auto drop = static_cast<std::size_t>(std::floor(trim_fraction * static_cast<double>(n)));
  if (n < 2 * drop + 2) throw InsufficientData("trimmed_moments: fewer than 2 values survive trimming");
  std::sort(values.begin(), values.end());
  const auto first = values.begin() + static_cast<std::ptrdiff_t>(drop);
  const auto last = values.end() - static_cast<std::ptrdiff_t>(drop);
  TrimmedMoments m;
  m.kept = n - 2 * drop;
  const double k = static_cast<double>(m.kept);
  double sum = 0.0;
  for (auto it = first; it != last; ++it) sum += *it;
  m.mean = sum / k;
  double ss = 0.0;
  for (auto it = first; it != last; ++it) ss += (*it - m.mean) * (*it - m.mean);
  m.kept_std = std::sqrt(ss / (k - 1.0));
  m.std = m.kept_std;
  if (drop > 0) {
    const double p = static_cast<double>(drop) / static_cast<double>(n);
    const double z = normal_quantile(1.0 - p);
    const double ratio = 1.0 - 2.0 * z * normal_pdf(z) / (1.0 - 2.0 * p);
    m.std = m.kept_std / std::sqrt(ratio);
  }
  return m;
}

GapDistributionSet fit_gap_distributions(const ResidualPool& pool, double trim_fraction) {
  constexpr std::size_t kMinResiduals = 40;
  GapDistributionSet set;
  set.window = pool.window();
  set.trim_fraction = trim_fraction;
  for (std::size_t j = 0; j < kSensorCount; ++j) {
    const auto& r = pool.residuals[j];
    if (r.size() != set.window) throw ArgumentError("fit_gap_distributions: unequal residual pools");
    if (r.size() < kMinResiduals)
      throw InsufficientData("insufficient validation data for sensor " + std::to_string(j) + ": " +
                             std::to_string(r.size()) + " residuals, need " + std::to_string(kMinResiduals));
    const TrimmedMoments m = trimmed_moments(r, trim_fraction);
    set.sensors[j] = {m.mean, m.std, m.kept};
  }
  return set;
}

std::vector<Example> build_finetune_dataset(std::span<const RepositoryRecord> records, const GapDistributionSet& gaps,
                                            Seed seed) {
  if (records.empty()) throw ArgumentError("build_finetune_dataset: no design-sim records");
  Rng rng = make_rng(seed);
  std::normal_distribution<double> z(0.0, 1.0);
  std::vector<Example> out;
  out.reserve(records.size());
  for (const auto& rec : records) {
    if (rec.provenance != Provenance::DesignSim)
      throw ArgumentError("build_finetune_dataset: expects design-sim records only");
    Example ex{rec.sensors, rec.config};
    for (std::size_t j = 0; j < kSensorCount; ++j) {
      const auto& g = gaps.sensors[j];
      ex.sensors.values[j] += g.mean + g.std * z(rng);
    }
    out.push_back(ex);
  }
  return out;
}

DetachResult detach(const SensorVector& physical, const GapDistributionSet& gaps, const RegressionModel& model,
                    const TrussModel& truss) {
  DetachResult r;
  r.predicted = predict(model, physical);
  truss.validate(r.predicted);
  r.detached.domain = Domain::Detached;
  for (std::size_t j = 0; j < kSensorCount; ++j) r.detached.values[j] = physical.values[j] - gaps.sensors[j].mean;
  return r;
}

// ---------------------------------------------------------------------------

std::string GapDistributionSet::to_json() const {
  nlohmann::json j;
  j["schema"] = "dtgap.gap_estimate/1";
  j["window"] = window;
  j["trim_fraction"] = trim_fraction;
  j["seed"] = seed;
  auto& arr = j["sensors"] = nlohmann::json::array();
  for (const auto& s : sensors) arr.push_back({{"mean", s.mean}, {"std", s.std}, {"count", s.count}});
  return j.dump();
}

GapDistributionSet GapDistributionSet::from_json(const std::string& text) {
  GapDistributionSet set;
  try {
    const auto j = nlohmann::json::parse(text);
    if (j.at("schema").get<std::string>() != "dtgap.gap_estimate/1") throw SchemaError("gap estimate: bad schema");
    set.window = j.at("window").get<std::size_t>();
    set.trim_fraction = j.at("trim_fraction").get<double>();
    set.seed = j.at("seed").get<Seed>();
    const auto& arr = j.at("sensors");
    if (arr.size() != kSensorCount) throw SchemaError("gap estimate: expected 42 sensors");
    for (std::size_t s = 0; s < kSensorCount; ++s)
      set.sensors[s] = {arr[s].at("mean").get<double>(), arr[s].at("std").get<double>(),
                        arr[s].at("count").get<std::size_t>()};
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("gap estimate: ") + e.what());
  }
  return set;
}

std::uint64_t GapDistributionSet::digest() const { return fnv1a(to_json()); }

}  // namespace dtgap
