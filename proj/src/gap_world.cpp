#include "dtgap/gap_world.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "dtgap/error.hpp"

namespace dtgap {

namespace {
constexpr const char* kSchema = "dtgap.gap_spec/1";
constexpr std::array<const char*, kFactorCount> kFactorKeys = {"drift", "environment", "interaction"};
}  // namespace

void GapInjectionSpec::validate() const {
  for (std::size_t j = 0; j < kSensorCount; ++j) {
    for (std::size_t f = 0; f < kFactorCount; ++f) {
      const auto& p = sensors[j][f];
      if (!std::isfinite(p.mean) || !std::isfinite(p.std) || p.std < 0.0)
        throw ArgumentError("gap spec sensor " + std::to_string(j) + " " + kFactorKeys[f] +
                            ": mean must be finite and std >= 0");
    }
  }
}

std::string GapInjectionSpec::to_json() const {
  nlohmann::json j;
  j["schema"] = kSchema;
  j["seed"] = seed;
  j["units"] = "m";
  auto& arr = j["sensors"] = nlohmann::json::array();
  for (const auto& s : sensors) {
    nlohmann::json row;
    for (std::size_t f = 0; f < kFactorCount; ++f) row[kFactorKeys[f]] = {s[f].mean, s[f].std};
    arr.push_back(row);
  }
  return j.dump(2);
}

GapInjectionSpec GapInjectionSpec::from_json(const std::string& text) {
  GapInjectionSpec spec;
  try {
    const auto j = nlohmann::json::parse(text);
    if (j.at("schema").get<std::string>() != kSchema)
      throw SchemaError("gap spec: unsupported schema '" + j.at("schema").get<std::string>() + "'");
    spec.seed = j.at("seed").get<Seed>();
    const auto& arr = j.at("sensors");
    if (!arr.is_array() || arr.size() != kSensorCount)
      throw SchemaError("gap spec: expected 42 sensor entries");
    for (std::size_t s = 0; s < kSensorCount; ++s) {
      for (std::size_t f = 0; f < kFactorCount; ++f) {
        const auto& pair = arr[s].at(kFactorKeys[f]);
        if (!pair.is_array() || pair.size() != 2) throw SchemaError("gap spec: factor entries are [mean, std]");
        spec.sensors[s][f] = {pair[0].get<double>(), pair[1].get<double>()};
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("gap spec: ") + e.what());
  }
  spec.validate();
  return spec;
}

GapInjectionSpec GapInjectionSpec::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ArgumentError("cannot open gap spec " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json(ss.str());
}

void GapInjectionSpec::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw ArgumentError("cannot write gap spec " + path.string());
  out << to_json() << "\n";
}

GapInjectionSpec default_gap_spec(Seed meta_seed) {
  GapInjectionSpec spec;
  spec.seed = meta_seed;
  Rng rng = make_rng(meta_seed);
  std::uniform_real_distribution<double> mean(-5e-4, 5e-4);
  std::uniform_real_distribution<double> std(1e-4, 5e-4);
  for (auto& s : spec.sensors) {
    for (auto& p : s) {
      p.mean = mean(rng);
      p.std = std(rng);
    }
  }
  return spec;
}

WorldInstance observe(const TrussModel& model, const AssetConfiguration& config, const GapInjectionSpec& spec,
                      Rng& rng) {
  spec.validate();
  WorldInstance w;
  w.config = config;
  w.virtual_readings = simulate(model, config);
  std::normal_distribution<double> z(0.0, 1.0);
  for (std::size_t f = 0; f < kFactorCount; ++f) {
    for (std::size_t j = 0; j < kSensorCount; ++j) {
      const auto& p = spec.sensors[j][f];
      w.draws[j][f] = p.mean + p.std * z(rng);
    }
  }
  w.physical.domain = Domain::Physical;
  for (std::size_t j = 0; j < kSensorCount; ++j) {
    w.physical.values[j] = ((w.virtual_readings.values[j] + w.draws[j][0]) + w.draws[j][1]) + w.draws[j][2];
  }
  return w;
}

std::array<GapMoments, kSensorCount> total_gap_distribution(const GapInjectionSpec& spec) {
  spec.validate();
  std::array<GapMoments, kSensorCount> out{};
  for (std::size_t j = 0; j < kSensorCount; ++j) {
    for (const auto& p : spec.sensors[j]) {
      out[j].mean += p.mean;
      out[j].variance += p.std * p.std;
    }
  }
  return out;
}

}  // namespace dtgap
