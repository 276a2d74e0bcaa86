#pragma once

#include <array>
#include <span>
#include <string>
#include <vector>

#include "dtgap/regressor.hpp"
#include "dtgap/repository.hpp"
#include "dtgap/seeding.hpp"
#include "dtgap/truss.hpp"

namespace dtgap {

inline constexpr double kDefaultTrimFraction = 0.025;

struct GapEstimate {
  double mean = 0.0;  // m
  double std = 0.0;   // m
  std::size_t count = 0;  // residuals kept after trimming

  bool operator==(const GapEstimate&) const = default;
};

struct GapDistributionSet {
  std::array<GapEstimate, kSensorCount> sensors{};
  std::size_t window = 0;  // residuals per sensor before trimming
  double trim_fraction = kDefaultTrimFraction;
  Seed seed = 0;

  std::string to_json() const;
  static GapDistributionSet from_json(const std::string& text);
  std::uint64_t digest() const;

  bool operator==(const GapDistributionSet&) const = default;
};

// residuals[j][i] = physical_i[j] - virtual(predicted_i)[j].
struct ResidualPool {
  std::array<std::vector<double>, kSensorCount> residuals;

  std::size_t window() const { return residuals[0].size(); }
};

struct DeployedObservation {
  SensorVector physical;
  AssetConfiguration predicted;
};

ResidualPool compute_residuals(std::span<const DeployedObservation> instances, const TrussModel& model);

// Central-mass moments of one residual sample.
struct TrimmedMoments {
  double mean = 0.0;
  double kept_std = 0.0;  // unbiased std of the kept values
  double std = 0.0;       // kept_std rescaled to be consistent for a normal
  std::size_t kept = 0;
};

// Sorts, drops floor(trim * n) values from each tail, and fits the kept
// values. The rescaling divides by sqrt(1 - 2 z phi(z) / (1 - 2p)) with
// p = dropped / n and z = Phi^-1(1 - p), the variance ratio of a normal
// truncated at +-z.
TrimmedMoments trimmed_moments(std::vector<double> values, double trim_fraction = kDefaultTrimFraction);

// Requires at least 40 residuals per sensor.
GapDistributionSet fit_gap_distributions(const ResidualPool& pool, double trim_fraction = kDefaultTrimFraction);

// One example per record: sensors plus a fresh N(mean_j, std_j^2) draw per
// sensor, labelled with the record's configuration.
std::vector<Example> build_finetune_dataset(std::span<const RepositoryRecord> records,
                                            const GapDistributionSet& gaps, Seed seed);

struct DetachResult {
  SensorVector detached;
  AssetConfiguration predicted;
};

// predicted = predict(model, physical); detached[j] = physical[j] - mean_j.
DetachResult detach(const SensorVector& physical, const GapDistributionSet& gaps, const RegressionModel& model,
                    const TrussModel& truss);

double normal_cdf(double x);
double normal_pdf(double x);
// Inverse standard-normal CDF (Newton iteration on normal_cdf).
double normal_quantile(double p);

}  // namespace dtgap
