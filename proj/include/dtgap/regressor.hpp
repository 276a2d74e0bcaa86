#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "dtgap/seeding.hpp"
#include "dtgap/truss.hpp"

namespace dtgap {

enum class Activation { Tanh, Identity };

struct Hyperparams {
  std::size_t hidden = 64;
  Activation activation = Activation::Tanh;
  double learning_rate = 0.1;
  std::size_t batch_size = 4;

  bool operator==(const Hyperparams&) const = default;
};

// One supervised pair: sensors in, configuration out.
struct Example {
  SensorVector sensors;
  AssetConfiguration config;
};

// Per-feature affine map to zero mean / unit spread. Features with no
// spread keep std = 1 so the map stays invertible.
struct Standardizer {
  Eigen::VectorXd mean;
  Eigen::VectorXd std;

  static Standardizer fit(const Eigen::MatrixXd& rows);
  Eigen::VectorXd standardize(const Eigen::VectorXd& x) const;
  Eigen::VectorXd destandardize(const Eigen::VectorXd& z) const;
};

struct TrainingRun {
  int epochs = 0;
  double learning_rate = 0.0;
  std::size_t batch_size = 0;
  Seed seed = 0;
  double seconds = 0.0;  // wall-clock of the training loop only
  std::vector<double> loss_trace;  // full-dataset loss after each epoch
};

// 42 -> hidden -> 8 feed-forward network working on standardized data.
class RegressionModel {
 public:
  RegressionModel() = default;
  RegressionModel(Hyperparams hp, Standardizer input, Standardizer output, ConfigBounds bounds, Seed seed);

  const Hyperparams& hyperparams() const { return hp_; }
  const Standardizer& input_scaler() const { return in_; }
  const Standardizer& output_scaler() const { return out_; }
  const ConfigBounds& bounds() const { return bounds_; }
  Seed seed() const { return seed_; }

  // Parameters, row-major per layer: w1 is hidden x 42, w2 is 8 x hidden.
  Eigen::MatrixXd& w1() { return w1_; }
  Eigen::VectorXd& b1() { return b1_; }
  Eigen::MatrixXd& w2() { return w2_; }
  Eigen::VectorXd& b2() { return b2_; }
  const Eigen::MatrixXd& w1() const { return w1_; }
  const Eigen::VectorXd& b1() const { return b1_; }
  const Eigen::MatrixXd& w2() const { return w2_; }
  const Eigen::VectorXd& b2() const { return b2_; }

  // Rows are standardized inputs; returns standardized outputs.
  Eigen::MatrixXd forward(const Eigen::MatrixXd& x) const;

  // Raw (unclamped) prediction in physical units.
  std::array<double, kConfigDim> predict_raw(const SensorVector& sensors) const;

  std::string to_json() const;
  static RegressionModel from_json(const std::string& text);
  void save(const std::filesystem::path& path) const;
  static RegressionModel load(const std::filesystem::path& path);

  bool operator==(const RegressionModel& other) const;

 private:
  friend struct Backprop;
  Hyperparams hp_;
  Standardizer in_;
  Standardizer out_;
  ConfigBounds bounds_;
  Seed seed_ = 0;
  Eigen::MatrixXd w1_;
  Eigen::VectorXd b1_;
  Eigen::MatrixXd w2_;
  Eigen::VectorXd b2_;
};

// Fits standardization on `dataset`, initialises weights from `seed` and
// runs `epochs` of shuffled mini-batch gradient descent on the mean squared
// error in standardized output space. Requires at least 10 examples.
std::pair<RegressionModel, TrainingRun> pretrain(std::span<const Example> dataset, const Hyperparams& hp,
                                                 int epochs, Seed seed, const ConfigBounds& bounds);

// Continues descent from `model`'s weights, reusing its standardization.
// `learning_rate` overrides the model's own when set.
std::pair<RegressionModel, TrainingRun> fine_tune(const RegressionModel& model, std::span<const Example> dataset,
                                                  int epochs, Seed seed,
                                                  std::optional<double> learning_rate = std::nullopt);

// De-standardized prediction clamped into the model's configuration bounds.
AssetConfiguration predict(const RegressionModel& model, const SensorVector& sensors);

// Mean squared error in standardized output space over `dataset`.
double training_loss(const RegressionModel& model, std::span<const Example> dataset);

// Max over all parameters of |analytic - numeric| / max(|analytic|, |numeric|, 1e-3)
// where numeric is the central difference with step 1e-5 of the
// single-example loss, evaluated in extended precision.
double gradient_check(const RegressionModel& model, const Example& example);

// Gradient of the single-example loss with respect to every parameter, in
// the order w1, b1, w2, b2 (row-major).
Eigen::VectorXd parameter_gradient(const RegressionModel& model, const Example& example);

}  // namespace dtgap
