#pragma once

#include <cmath>
#include <memory>
#include <random>
#include <vector>

#include "dtgap/orchestrator.hpp"
#include "dtgap/truss.hpp"

namespace dtgap::testing {

inline const TrussModel& bridge() {
  static const TrussModel model = TrussModel::pratt_bridge(StructureParams{});
  return model;
}

inline DigitalTwin twin() {
  DigitalTwin t;
  t.truss = std::make_shared<TrussModel>(TrussModel::pratt_bridge(t.structure));
  t.regressor = Hyperparams{};
  return t;
}

// Any valid configuration, health down to the floor.
inline AssetConfiguration random_config(Rng& rng, double health_min = 0.05) {
  std::uniform_real_distribution<double> h(health_min, 1.0), load(0.0, 1.0e5), temp(-10.0, 40.0);
  std::uniform_int_distribution<int> pos(0, 20);
  AssetConfiguration c;
  for (auto& v : c.health) v = h(rng);
  c.load_magnitude = load(rng);
  c.load_position = pos(rng);
  c.temperature = temp(rng);
  return c;
}

inline double rel(double a, double b) { return std::abs(a - b) / std::max(std::abs(a), std::abs(b)); }

}  // namespace dtgap::testing
