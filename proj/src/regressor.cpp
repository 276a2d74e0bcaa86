#include "dtgap/regressor.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "dtgap/error.hpp"

namespace dtgap {

namespace {

constexpr const char* kSchema = "dtgap.model/1";

Eigen::VectorXd sensor_row(const SensorVector& s) {
  Eigen::VectorXd v(static_cast<Eigen::Index>(kSensorCount));
  for (std::size_t j = 0; j < kSensorCount; ++j) v[static_cast<Eigen::Index>(j)] = s.values[j];
  return v;
}

Eigen::VectorXd config_row(const AssetConfiguration& c) {
  const auto a = c.to_array();
  Eigen::VectorXd v(static_cast<Eigen::Index>(kConfigDim));
  for (std::size_t j = 0; j < kConfigDim; ++j) v[static_cast<Eigen::Index>(j)] = a[j];
  return v;
}

// Standardized design matrices for a dataset.
struct Batch {
  Eigen::MatrixXd x;
  Eigen::MatrixXd y;
};

Batch standardized(const RegressionModel& m, std::span<const Example> data) {
  Batch b{Eigen::MatrixXd(static_cast<Eigen::Index>(data.size()), static_cast<Eigen::Index>(kSensorCount)),
          Eigen::MatrixXd(static_cast<Eigen::Index>(data.size()), static_cast<Eigen::Index>(kConfigDim))};
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    b.x.row(r) = m.input_scaler().standardize(sensor_row(data[i].sensors)).transpose();
    b.y.row(r) = m.output_scaler().standardize(config_row(data[i].config)).transpose();
  }
  return b;
}

void check_finite(std::span<const Example> data) {
  for (std::size_t i = 0; i < data.size(); ++i) {
    for (double v : data[i].sensors.values)
      if (!std::isfinite(v)) throw ArgumentError("example " + std::to_string(i) + " has non-finite sensors");
    for (double v : data[i].config.to_array())
      if (!std::isfinite(v)) throw ArgumentError("example " + std::to_string(i) + " has non-finite label");
  }
}

}  // namespace

// ---------------------------------------------------------------------------

Standardizer Standardizer::fit(const Eigen::MatrixXd& rows) {
  Standardizer s;
  const auto n = static_cast<double>(rows.rows());
  s.mean = rows.colwise().sum().transpose() / n;
  s.std = Eigen::VectorXd(rows.cols());
  for (Eigen::Index c = 0; c < rows.cols(); ++c) {
    const double var = (rows.col(c).array() - s.mean[c]).square().sum() / n;
    const double sd = std::sqrt(var);
    s.std[c] = sd > 1e-12 * std::max(1.0, std::abs(s.mean[c])) ? sd : 1.0;
  }
  return s;
}

Eigen::VectorXd Standardizer::standardize(const Eigen::VectorXd& x) const {
  return ((x - mean).array() / std.array()).matrix();
}

Eigen::VectorXd Standardizer::destandardize(const Eigen::VectorXd& z) const {
  return (z.array() * std.array()).matrix() + mean;
}

// ---------------------------------------------------------------------------

RegressionModel::RegressionModel(Hyperparams hp, Standardizer input, Standardizer output, ConfigBounds bounds,
                                 Seed seed)
    : hp_(hp), in_(std::move(input)), out_(std::move(output)), bounds_(bounds), seed_(seed) {
  const auto h = static_cast<Eigen::Index>(hp_.hidden);
  const auto ni = static_cast<Eigen::Index>(kSensorCount);
  const auto no = static_cast<Eigen::Index>(kConfigDim);
  w1_ = Eigen::MatrixXd::Zero(h, ni);
  b1_ = Eigen::VectorXd::Zero(h);
  w2_ = Eigen::MatrixXd::Zero(no, h);
  b2_ = Eigen::VectorXd::Zero(no);
  // Glorot-uniform weights, zero biases.
  Rng rng = make_rng(derive_seed(seed, "init"));
  std::uniform_real_distribution<double> u1(-std::sqrt(6.0 / static_cast<double>(ni + h)),
                                            std::sqrt(6.0 / static_cast<double>(ni + h)));
  for (Eigen::Index r = 0; r < h; ++r)
    for (Eigen::Index c = 0; c < ni; ++c) w1_(r, c) = u1(rng);
  std::uniform_real_distribution<double> u2(-std::sqrt(6.0 / static_cast<double>(h + no)),
                                            std::sqrt(6.0 / static_cast<double>(h + no)));
  for (Eigen::Index r = 0; r < no; ++r)
    for (Eigen::Index c = 0; c < h; ++c) w2_(r, c) = u2(rng);
}

Eigen::MatrixXd RegressionModel::forward(const Eigen::MatrixXd& x) const {
  Eigen::MatrixXd a = (x * w1_.transpose()).rowwise() + b1_.transpose();
  if (hp_.activation == Activation::Tanh) a = a.array().tanh().matrix();
  return (a * w2_.transpose()).rowwise() + b2_.transpose();
}

std::array<double, kConfigDim> RegressionModel::predict_raw(const SensorVector& sensors) const {
  for (double v : sensors.values)
    if (!std::isfinite(v)) throw ArgumentError("predict: non-finite sensor reading");
  const Eigen::MatrixXd z = forward(in_.standardize(sensor_row(sensors)).transpose());
  const Eigen::VectorXd y = out_.destandardize(z.row(0).transpose());
  std::array<double, kConfigDim> out{};
  for (std::size_t j = 0; j < kConfigDim; ++j) out[j] = y[static_cast<Eigen::Index>(j)];
  return out;
}

bool RegressionModel::operator==(const RegressionModel& o) const {
  return hp_ == o.hp_ && seed_ == o.seed_ && in_.mean == o.in_.mean && in_.std == o.in_.std &&
         out_.mean == o.out_.mean && out_.std == o.out_.std && bounds_.lo == o.bounds_.lo &&
         bounds_.hi == o.bounds_.hi && w1_ == o.w1_ && b1_ == o.b1_ && w2_ == o.w2_ && b2_ == o.b2_;
}

namespace {

nlohmann::json vec_json(const Eigen::VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

nlohmann::json mat_json(const Eigen::MatrixXd& m) {
  std::vector<double> flat;
  flat.reserve(static_cast<std::size_t>(m.size()));
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) flat.push_back(m(r, c));
  return flat;
}

Eigen::VectorXd json_vec(const nlohmann::json& j, std::size_t n, const char* what) {
  const auto v = j.get<std::vector<double>>();
  if (v.size() != n) throw SchemaError(std::string("model checkpoint: bad length for ") + what);
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(n));
}

Eigen::MatrixXd json_mat(const nlohmann::json& j, std::size_t rows, std::size_t cols, const char* what) {
  const auto v = j.get<std::vector<double>>();
  if (v.size() != rows * cols) throw SchemaError(std::string("model checkpoint: bad length for ") + what);
  Eigen::MatrixXd m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = v[r * cols + c];
  return m;
}

}  // namespace

std::string RegressionModel::to_json() const {
  nlohmann::json j;
  j["schema"] = kSchema;
  j["seed"] = seed_;
  j["hyperparams"] = {{"hidden", hp_.hidden},
                      {"activation", hp_.activation == Activation::Tanh ? "tanh" : "identity"},
                      {"learning_rate", hp_.learning_rate},
                      {"batch_size", hp_.batch_size}};
  j["input_mean"] = vec_json(in_.mean);
  j["input_std"] = vec_json(in_.std);
  j["output_mean"] = vec_json(out_.mean);
  j["output_std"] = vec_json(out_.std);
  j["bounds_lo"] = bounds_.lo;
  j["bounds_hi"] = bounds_.hi;
  j["w1"] = mat_json(w1_);
  j["b1"] = vec_json(b1_);
  j["w2"] = mat_json(w2_);
  j["b2"] = vec_json(b2_);
  return j.dump();
}

RegressionModel RegressionModel::from_json(const std::string& text) {
  RegressionModel m;
  try {
    const auto j = nlohmann::json::parse(text);
    if (j.at("schema").get<std::string>() != kSchema)
      throw SchemaError("model checkpoint: unsupported schema '" + j.at("schema").get<std::string>() + "'");
    m.seed_ = j.at("seed").get<Seed>();
    const auto& hp = j.at("hyperparams");
    m.hp_.hidden = hp.at("hidden").get<std::size_t>();
    const auto act = hp.at("activation").get<std::string>();
    if (act != "tanh" && act != "identity") throw SchemaError("model checkpoint: unknown activation " + act);
    m.hp_.activation = act == "tanh" ? Activation::Tanh : Activation::Identity;
    m.hp_.learning_rate = hp.at("learning_rate").get<double>();
    m.hp_.batch_size = hp.at("batch_size").get<std::size_t>();
    m.in_.mean = json_vec(j.at("input_mean"), kSensorCount, "input_mean");
    m.in_.std = json_vec(j.at("input_std"), kSensorCount, "input_std");
    m.out_.mean = json_vec(j.at("output_mean"), kConfigDim, "output_mean");
    m.out_.std = json_vec(j.at("output_std"), kConfigDim, "output_std");
    m.bounds_.lo = j.at("bounds_lo").get<std::array<double, kConfigDim>>();
    m.bounds_.hi = j.at("bounds_hi").get<std::array<double, kConfigDim>>();
    m.w1_ = json_mat(j.at("w1"), m.hp_.hidden, kSensorCount, "w1");
    m.b1_ = json_vec(j.at("b1"), m.hp_.hidden, "b1");
    m.w2_ = json_mat(j.at("w2"), kConfigDim, m.hp_.hidden, "w2");
    m.b2_ = json_vec(j.at("b2"), kConfigDim, "b2");
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("model checkpoint: ") + e.what());
  }
  return m;
}

void RegressionModel::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw ArgumentError("cannot write model checkpoint " + path.string());
  out << to_json() << "\n";
}

RegressionModel RegressionModel::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ArgumentError("cannot open model checkpoint " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json(ss.str());
}

// ---------------------------------------------------------------------------
// Backpropagation

struct Backprop {
  // Loss = mean over rows and outputs of squared error. Accumulates the
  // gradient into the g* members and returns the loss.
  static double loss_and_grad(const RegressionModel& m, const Eigen::MatrixXd& x, const Eigen::MatrixXd& y,
                              Eigen::MatrixXd& gw1, Eigen::VectorXd& gb1, Eigen::MatrixXd& gw2,
                              Eigen::VectorXd& gb2) {
    Eigen::MatrixXd h = (x * m.w1_.transpose()).rowwise() + m.b1_.transpose();
    if (m.hp_.activation == Activation::Tanh) h = h.array().tanh().matrix();
    const Eigen::MatrixXd out = (h * m.w2_.transpose()).rowwise() + m.b2_.transpose();
    const Eigen::MatrixXd err = out - y;
    const double denom = static_cast<double>(err.size());
    const double loss = err.squaredNorm() / denom;
    const Eigen::MatrixXd d_out = err * (2.0 / denom);
    gw2.noalias() = d_out.transpose() * h;
    gb2 = d_out.colwise().sum().transpose();
    Eigen::MatrixXd d_h = d_out * m.w2_;
    if (m.hp_.activation == Activation::Tanh) d_h.array() *= 1.0 - h.array().square();
    gw1.noalias() = d_h.transpose() * x;
    gb1 = d_h.colwise().sum().transpose();
    return loss;
  }

  static double loss(const RegressionModel& m, const Eigen::MatrixXd& x, const Eigen::MatrixXd& y) {
    return (m.forward(x) - y).squaredNorm() / static_cast<double>(y.size());
  }

  // Same loss accumulated in extended precision, for finite differences.
  static long double loss_extended(const RegressionModel& m, const Eigen::MatrixXd& x, const Eigen::MatrixXd& y) {
    const Eigen::Index nh = m.w1_.rows();
    std::vector<long double> h(static_cast<std::size_t>(nh));
    long double total = 0.0L;
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
      for (Eigen::Index i = 0; i < nh; ++i) {
        long double a = m.b1_[i];
        for (Eigen::Index c = 0; c < x.cols(); ++c) a += static_cast<long double>(m.w1_(i, c)) * x(r, c);
        h[static_cast<std::size_t>(i)] = m.hp_.activation == Activation::Tanh ? std::tanh(a) : a;
      }
      for (Eigen::Index o = 0; o < m.w2_.rows(); ++o) {
        long double z = m.b2_[o];
        for (Eigen::Index i = 0; i < nh; ++i) z += static_cast<long double>(m.w2_(o, i)) * h[static_cast<std::size_t>(i)];
        const long double e = z - y(r, o);
        total += e * e;
      }
    }
    return total / static_cast<long double>(y.size());
  }

  static TrainingRun descend(RegressionModel& m, const Batch& data, int epochs, Seed seed, double lr) {
    TrainingRun run;
    run.epochs = epochs;
    run.learning_rate = lr;
    run.batch_size = m.hp_.batch_size;
    run.seed = seed;
    const auto n = static_cast<std::size_t>(data.x.rows());
    const std::size_t bs = std::max<std::size_t>(1, std::min(m.hp_.batch_size, n));
    std::vector<Eigen::Index> order(n);
    std::iota(order.begin(), order.end(), Eigen::Index{0});
    Rng rng = make_rng(derive_seed(seed, "shuffle"));
    Eigen::MatrixXd gw1, gw2, bx, by;
    Eigen::VectorXd gb1, gb2;

    const auto t0 = std::chrono::steady_clock::now();
    for (int epoch = 0; epoch < epochs; ++epoch) {
      std::shuffle(order.begin(), order.end(), rng);
      for (std::size_t start = 0; start < n; start += bs) {
        const std::size_t len = std::min(bs, n - start);
        bx.resize(static_cast<Eigen::Index>(len), data.x.cols());
        by.resize(static_cast<Eigen::Index>(len), data.y.cols());
        for (std::size_t k = 0; k < len; ++k) {
          bx.row(static_cast<Eigen::Index>(k)) = data.x.row(order[start + k]);
          by.row(static_cast<Eigen::Index>(k)) = data.y.row(order[start + k]);
        }
        loss_and_grad(m, bx, by, gw1, gb1, gw2, gb2);
        m.w1_ -= lr * gw1;
        m.b1_ -= lr * gb1;
        m.w2_ -= lr * gw2;
        m.b2_ -= lr * gb2;
      }
      const double epoch_loss = loss(m, data.x, data.y);
      if (!std::isfinite(epoch_loss))
        throw Diverged("training diverged at epoch " + std::to_string(epoch + 1), epoch + 1);
      run.loss_trace.push_back(epoch_loss);
    }
    run.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return run;
  }
};

std::pair<RegressionModel, TrainingRun> pretrain(std::span<const Example> dataset, const Hyperparams& hp, int epochs,
                                                 Seed seed, const ConfigBounds& bounds) {
  if (dataset.empty()) throw ArgumentError("pretrain: empty dataset");
  if (dataset.size() < 10) throw ArgumentError("pretrain: need at least 10 examples");
  if (epochs < 1) throw ArgumentError("pretrain: epochs must be >= 1");
  if (hp.hidden == 0 || hp.batch_size == 0 || !(hp.learning_rate > 0.0))
    throw ArgumentError("pretrain: invalid hyperparameters");
  check_finite(dataset);
  Eigen::MatrixXd xs(static_cast<Eigen::Index>(dataset.size()), static_cast<Eigen::Index>(kSensorCount));
  Eigen::MatrixXd ys(static_cast<Eigen::Index>(dataset.size()), static_cast<Eigen::Index>(kConfigDim));
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    xs.row(static_cast<Eigen::Index>(i)) = sensor_row(dataset[i].sensors).transpose();
    ys.row(static_cast<Eigen::Index>(i)) = config_row(dataset[i].config).transpose();
  }
  RegressionModel model(hp, Standardizer::fit(xs), Standardizer::fit(ys), bounds, seed);
  const Batch data = standardized(model, dataset);
  TrainingRun run = Backprop::descend(model, data, epochs, derive_seed(seed, "pretrain"), hp.learning_rate);
  run.seed = seed;
  return {std::move(model), std::move(run)};
}

std::pair<RegressionModel, TrainingRun> fine_tune(const RegressionModel& model, std::span<const Example> dataset,
                                                  int epochs, Seed seed, std::optional<double> learning_rate) {
  if (epochs < 0) throw ArgumentError("fine_tune: epochs must be >= 0");
  if (model.w1().size() == 0) throw ArgumentError("fine_tune: model is not trained");
  RegressionModel tuned = model;
  const double lr = learning_rate.value_or(model.hyperparams().learning_rate);
  if (epochs == 0) {
    TrainingRun run;
    run.learning_rate = lr;
    run.batch_size = model.hyperparams().batch_size;
    run.seed = seed;
    return {std::move(tuned), std::move(run)};
  }
  if (dataset.empty()) throw ArgumentError("fine_tune: empty dataset");
  check_finite(dataset);
  const Batch data = standardized(tuned, dataset);
  TrainingRun run = Backprop::descend(tuned, data, epochs, derive_seed(seed, "fine_tune"), lr);
  run.seed = seed;
  return {std::move(tuned), std::move(run)};
}

AssetConfiguration predict(const RegressionModel& model, const SensorVector& sensors) {
  if (model.w1().size() == 0) throw ArgumentError("predict: model is not trained");
  return model.bounds().clamp(model.predict_raw(sensors));
}

double training_loss(const RegressionModel& model, std::span<const Example> dataset) {
  if (dataset.empty()) throw ArgumentError("training_loss: empty dataset");
  const Batch data = standardized(model, dataset);
  return Backprop::loss(model, data.x, data.y);
}

Eigen::VectorXd parameter_gradient(const RegressionModel& model, const Example& example) {
  const Batch data = standardized(model, std::span<const Example>(&example, 1));
  Eigen::MatrixXd gw1, gw2;
  Eigen::VectorXd gb1, gb2;
  Backprop::loss_and_grad(model, data.x, data.y, gw1, gb1, gw2, gb2);
  Eigen::VectorXd g(gw1.size() + gb1.size() + gw2.size() + gb2.size());
  Eigen::Index k = 0;
  for (Eigen::Index r = 0; r < gw1.rows(); ++r)
    for (Eigen::Index c = 0; c < gw1.cols(); ++c) g[k++] = gw1(r, c);
  for (Eigen::Index i = 0; i < gb1.size(); ++i) g[k++] = gb1[i];
  for (Eigen::Index r = 0; r < gw2.rows(); ++r)
    for (Eigen::Index c = 0; c < gw2.cols(); ++c) g[k++] = gw2(r, c);
  for (Eigen::Index i = 0; i < gb2.size(); ++i) g[k++] = gb2[i];
  return g;
}

double gradient_check(const RegressionModel& model, const Example& example) {
  constexpr double kStep = 1e-5;
  constexpr double kFloor = 1e-3;
  const Eigen::VectorXd analytic = parameter_gradient(model, example);
  const Batch data = standardized(model, std::span<const Example>(&example, 1));
  RegressionModel probe = model;
  double worst = 0.0;
  Eigen::Index k = 0;
  const auto visit = [&](double& param) {
    const double saved = param;
    const double hi = saved + kStep;
    const double lo = saved - kStep;
    param = hi;
    const long double up = Backprop::loss_extended(probe, data.x, data.y);
    param = lo;
    const long double down = Backprop::loss_extended(probe, data.x, data.y);
    param = saved;
    const auto numeric = static_cast<double>((up - down) / (static_cast<long double>(hi) - lo));
    const double a = analytic[k++];
    const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), kFloor});
    if (std::isfinite(rel)) worst = std::max(worst, rel);
    else worst = std::numeric_limits<double>::infinity();
  };
  for (Eigen::Index r = 0; r < probe.w1().rows(); ++r)
    for (Eigen::Index c = 0; c < probe.w1().cols(); ++c) visit(probe.w1()(r, c));
  for (Eigen::Index i = 0; i < probe.b1().size(); ++i) visit(probe.b1()[i]);
  for (Eigen::Index r = 0; r < probe.w2().rows(); ++r)
    for (Eigen::Index c = 0; c < probe.w2().cols(); ++c) visit(probe.w2()(r, c));
  for (Eigen::Index i = 0; i < probe.b2().size(); ++i) visit(probe.b2()[i]);
  return worst;
}

}  // namespace dtgap
