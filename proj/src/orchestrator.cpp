#include "dtgap/orchestrator.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <map>
#include <mutex>
#include <numeric>
#include <regex>
#include <sstream>
#include <thread>

#include "dtgap/error.hpp"

namespace dtgap {

// ---------------------------------------------------------------------------
// Digests

namespace {

class Digest {
 public:
  Digest& add(double v) {
    char buf[sizeof v];
    std::memcpy(buf, &v, sizeof v);
    h_ = fnv1a(std::string_view(buf, sizeof buf), h_);
    return *this;
  }
  Digest& add(std::uint64_t v) {
    char buf[sizeof v];
    std::memcpy(buf, &v, sizeof v);
    h_ = fnv1a(std::string_view(buf, sizeof buf), h_);
    return *this;
  }
  Digest& add(std::string_view s) {
    h_ = fnv1a(s, h_);
    return *this;
  }
  Digest& add(const SensorVector& s) {
    for (double v : s.values) add(v);
    return *this;
  }
  Digest& add(const AssetConfiguration& c) {
    for (double v : c.to_array()) add(v);
    return *this;
  }
  std::string hex() const { return hex64(h_); }

 private:
  std::uint64_t h_ = 0xcbf29ce484222325ULL;
};

std::string digest_records(std::span<const RepositoryRecord> records) {
  Digest d;
  for (const auto& r : records) d.add(r.config).add(r.sensors);
  return d.hex();
}

std::string digest_model(const RegressionModel& m) {
  Digest d;
  for (Eigen::Index i = 0; i < m.w1().size(); ++i) d.add(m.w1().data()[i]);
  for (Eigen::Index i = 0; i < m.b1().size(); ++i) d.add(m.b1()[i]);
  for (Eigen::Index i = 0; i < m.w2().size(); ++i) d.add(m.w2().data()[i]);
  for (Eigen::Index i = 0; i < m.b2().size(); ++i) d.add(m.b2()[i]);
  return d.hex();
}

}  // namespace

// ---------------------------------------------------------------------------
// Protocol

std::string to_string(Phase p) {
  switch (p) {
    case Phase::Init: return "Init";
    case Phase::CapabilityConfirmed: return "CapabilityConfirmed";
    case Phase::DesignDataChecked: return "DesignDataChecked";
    case Phase::DesignDataSimulated: return "DesignDataSimulated";
    case Phase::Pretrained: return "Pretrained";
    case Phase::Deployed: return "Deployed";
  }
  return "?";
}

std::string to_string(EventKind k) {
  static const std::array<const char*, 11> names = {"Q1", "R1", "Q2", "R2", "Q3", "R3",
                                                    "Q4", "R4", "Q5", "R5", "Fault"};
  return names[static_cast<std::size_t>(k)];
}

void ProtocolState::record(EventKind kind, std::string digest, bool flag, std::string note) {
  const auto bad = [&] {
    return ProtocolError("protocol: " + to_string(kind) + " not allowed after " +
                         (transcript_.empty() ? std::string("start") : to_string(transcript_.back().kind)));
  };
  if (faulted()) throw bad();
  const EventKind prev = transcript_.empty() ? EventKind::Fault : transcript_.back().kind;
  const bool prev_flag = transcript_.empty() ? false : transcript_.back().flag;
  bool ok = false;
  switch (kind) {
    case EventKind::Q1: ok = transcript_.empty(); break;
    case EventKind::R1: ok = prev == EventKind::Q1; break;
    case EventKind::Q2: ok = prev == EventKind::R1 && prev_flag; break;
    case EventKind::R2: ok = prev == EventKind::Q2; break;
    case EventKind::Q3: ok = prev == EventKind::R2 && !prev_flag; break;
    case EventKind::R3: ok = prev == EventKind::Q3; break;
    case EventKind::Q4: ok = (prev == EventKind::R2 && prev_flag) || prev == EventKind::R3; break;
    case EventKind::R4: ok = prev == EventKind::Q4; break;
    case EventKind::Q5: ok = prev == EventKind::R4 || prev == EventKind::R5; break;
    case EventKind::R5: ok = prev == EventKind::Q5; break;
    case EventKind::Fault: ok = true; break;
  }
  if (!ok) throw bad();
  transcript_.push_back({kind, std::move(digest), flag, std::move(note)});
  switch (kind) {
    case EventKind::R1: if (flag) phase_ = Phase::CapabilityConfirmed; break;
    case EventKind::R2: phase_ = Phase::DesignDataChecked; break;
    case EventKind::R3: phase_ = Phase::DesignDataSimulated; break;
    case EventKind::R4: phase_ = Phase::Pretrained; break;
    case EventKind::Q5: phase_ = Phase::Deployed; break;
    default: break;
  }
}

void ProtocolState::record_fault(const std::string& what) {
  if (faulted()) return;
  transcript_.push_back({EventKind::Fault, {}, false, what});
}

bool transcript_accepted(std::span<const ProtocolEvent> events) {
  std::string tokens;
  for (const auto& e : events) {
    if (!tokens.empty()) tokens += ' ';
    if (e.kind == EventKind::Fault) {
      tokens += 'F';
      continue;
    }
    tokens += to_string(e.kind);
    if (e.kind == EventKind::R1 || e.kind == EventKind::R2) tokens += e.flag ? '+' : '-';
  }
  static const std::regex complete(R"(^Q1 R1\+ Q2 (R2\+|R2- Q3 R3) Q4 R4( Q5 R5)*$)");
  if (std::regex_match(tokens, complete)) return true;
  // Faulted traces: any prefix of a complete trace (or a refused
  // capability check) followed by F.
  if (tokens.empty() || tokens.back() != 'F') return false;
  std::string prefix = tokens.substr(0, tokens.size() - 1);
  if (!prefix.empty() && prefix.back() == ' ') prefix.pop_back();
  const std::string tail = "( Q4( R4( Q5 R5)*( Q5)?)?)?";
  static const std::regex partial("^(Q1( R1\\+( Q2(( R2\\+" + tail + ")|( R2-( Q3( R3" + tail +
                                  ")?)?))?)?)?|Q1 R1-)?$");
  return std::regex_match(prefix, partial);
}

// ---------------------------------------------------------------------------
// Plans

std::string to_string(LoI l) {
  switch (l) {
    case LoI::A: return "A";
    case LoI::B: return "B";
    case LoI::C: return "C";
  }
  return "?";
}

LoI loi_from_string(const std::string& s) {
  if (s == "A" || s == "a") return LoI::A;
  if (s == "B" || s == "b") return LoI::B;
  if (s == "C" || s == "c") return LoI::C;
  throw ArgumentError("unknown level of integration '" + s + "'");
}

void ExperimentPlan::validate() const {
  if (epochs < 1) throw ArgumentError("plan: epochs must be positive");
  if (finetune_epochs < 0) throw ArgumentError("plan: fine-tune epochs must be non-negative");
  for (double f : fractions)
    if (!(f >= 0.0)) throw ArgumentError("plan: split fractions must be non-negative");
  if (std::abs(fractions[0] + fractions[1] + fractions[2] - 1.0) > 1e-12)
    throw ArgumentError("plan: split fractions must sum to 1");
  if (!(finetune_fraction > 0.0 && finetune_fraction <= 1.0))
    throw ArgumentError("plan: fine-tune fraction must lie in (0, 1]");
}

// ---------------------------------------------------------------------------
// Data plumbing

DatasetSplit split_dataset(std::span<const RepositoryRecord> records, Seed seed,
                           const std::array<double, 3>& fractions) {
  const std::size_t n = records.size();
  if (n < 10) throw InsufficientData("split_dataset: need at least 10 records, got " + std::to_string(n));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng = make_rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_train = static_cast<std::size_t>(std::floor(fractions[0] * static_cast<double>(n)));
  const auto n_val = static_cast<std::size_t>(std::floor(fractions[1] * static_cast<double>(n)));
  DatasetSplit s;
  for (std::size_t k = 0; k < n; ++k) {
    const auto& r = records[order[k]];
    if (k < n_train) s.train.push_back(r);
    else if (k < n_train + n_val) s.validation.push_back(r);
    else s.test.push_back(r);
  }
  return s;
}

std::vector<RepositoryRecord> generate_design_records(const DigitalTwin& twin, std::size_t count, Seed seed,
                                                      unsigned jobs) {
  if (!twin.truss) throw ArgumentError("generate_design_records: no truss model registered");
  const auto configs = sample_configurations(twin.structure, count, seed);
  const auto sensors = simulate_batch(*twin.truss, configs, jobs);
  std::vector<RepositoryRecord> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    RepositoryRecord r;
    r.config = configs[i];
    r.sensors = sensors[i];
    r.provenance = Provenance::DesignSim;
    r.seed = seed;
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<Example> to_examples(std::span<const RepositoryRecord> records) {
  std::vector<Example> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back({r.sensors, r.config});
  return out;
}

std::vector<WorldInstance> observe_all(const TrussModel& truss, std::span<const RepositoryRecord> records,
                                       const GapInjectionSpec& spec, Seed seed) {
  Rng rng = make_rng(seed);
  std::vector<WorldInstance> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back(observe(truss, r.config, spec, rng));
  return out;
}

// ---------------------------------------------------------------------------
// Metrics

double instance_mse(const SensorVector& physical, const SensorVector& virtual_at_prediction) {
  double sum = 0.0;
  for (std::size_t j = 0; j < kSensorCount; ++j) {
    const double d = physical.values[j] - virtual_at_prediction.values[j];
    sum += d * d;
  }
  return sum / static_cast<double>(kSensorCount);
}

Evaluation evaluate(std::span<const SensorVector> physicals, const RegressionModel& model, const TrussModel& truss) {
  if (physicals.empty()) throw ArgumentError("evaluate: no instances");
  Evaluation ev;
  ev.predicted.reserve(physicals.size());
  ev.virtual_at_prediction.reserve(physicals.size());
  ev.per_instance.reserve(physicals.size());
  double total = 0.0;
  for (std::size_t i = 0; i < physicals.size(); ++i) {
    const AssetConfiguration c = predict(model, physicals[i]);
    SensorVector v;
    try {
      v = simulate(truss, c);
    } catch (const Error& e) {
      throw Error("evaluate: instance " + std::to_string(i) + ": " + e.what());
    }
    const double m = instance_mse(physicals[i], v);
    total += m;
    ev.predicted.push_back(c);
    ev.virtual_at_prediction.push_back(v);
    ev.per_instance.push_back(m);
  }
  ev.mse = total / static_cast<double>(physicals.size());
  return ev;
}

double evaluate_mse(std::span<const SensorVector> physicals, const RegressionModel& model, const TrussModel& truss) {
  return evaluate(physicals, model, truss).mse;
}

// ---------------------------------------------------------------------------
// Protocol run

ProtocolRun run_protocol(Repository& repo, const DigitalTwin& twin, const ExperimentPlan& plan, ProtocolState& state) {
  try {
    plan.validate();
    state.record(EventKind::Q1, Digest().add("capability").hex());
    const bool capable = twin.truss != nullptr && twin.regressor.has_value() &&
                         twin.truss->sensor_dofs().size() == kSensorCount;
    state.record(EventKind::R1, {}, capable);
    if (!capable) throw ProtocolError("DT cannot compute reality gaps");

    state.record(EventKind::Q2, Digest().add("design-sim?").hex());
    const bool present = repo.has_design_data();
    state.record(EventKind::R2, {}, present);
    if (!present) {
      const Seed seed = derive_seed(plan.master_seed, "design-data");
      state.record(EventKind::Q3, Digest().add(static_cast<std::uint64_t>(plan.dataset_size)).add(seed).hex());
      const auto records = generate_design_records(twin, plan.dataset_size, seed);
      repo.ingest(records);
      state.record(EventKind::R3, digest_records(records), false, std::to_string(records.size()) + " records");
    }

    RecordFilter design;
    design.provenance = Provenance::DesignSim;
    const auto records = repo.query(design);
    state.record(EventKind::Q4, digest_records(records));
    ProtocolRun run;
    run.split = split_dataset(records, plan.split_seed, plan.fractions);
    auto [model, training] = pretrain(to_examples(run.split.train), *twin.regressor, plan.epochs,
                                      derive_seed(plan.split_seed, "pretrain"), twin.truss->bounds());
    run.model = std::move(model);
    run.training = std::move(training);
    state.record(EventKind::R4, digest_model(run.model));
    return run;
  } catch (const std::exception& e) {
    state.record_fault(e.what());
    throw;
  }
}

// ---------------------------------------------------------------------------
// LoI cells

namespace {

std::vector<SensorVector> physicals_of(std::span<const WorldInstance> w) {
  std::vector<SensorVector> out;
  out.reserve(w.size());
  for (const auto& i : w) out.push_back(i.physical);
  return out;
}

std::vector<RepositoryRecord> finetune_subset(std::span<const RepositoryRecord> train, double fraction, Seed seed) {
  const auto m = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(train.size()))));
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng = make_rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  order.resize(std::min(m, order.size()));
  std::sort(order.begin(), order.end());
  std::vector<RepositoryRecord> out;
  out.reserve(order.size());
  for (std::size_t i : order) out.push_back(train[i]);
  return out;
}

const char* stage_name(int stage) {
  static const std::array<const char*, 5> names = {"protocol", "observe", "gap quantification", "fine-tune",
                                                   "detach/augment"};
  return stage >= 0 && stage < 5 ? names[static_cast<std::size_t>(stage)] : "evaluate";
}

}  // namespace

LoIRun run_loi(const ExperimentPlan& plan, const Repository& repo, const DigitalTwin& twin,
               const GapInjectionSpec& spec) {
  LoIRun out;
  out.repository = repo.snapshot();
  int stage = 0;
  try {
    ProtocolRun pr = run_protocol(out.repository, twin, plan, out.protocol);
    out.pretrained = pr.model;
    out.model = pr.model;
    const TrussModel& truss = *twin.truss;

    stage = 1;
    const auto validation = observe_all(truss, pr.split.validation, spec, derive_seed(plan.split_seed, "world/validation"));
    out.test = observe_all(truss, pr.split.test, spec, derive_seed(plan.split_seed, "world/test"));

    double finetune_s = 0.0;
    if (plan.loi != LoI::A) {
      stage = 2;
      std::vector<DeployedObservation> deployed;
      deployed.reserve(validation.size());
      Digest q5;
      for (const auto& w : validation) {
        deployed.push_back({w.physical, predict(out.pretrained, w.physical)});
        q5.add(deployed.back().predicted);
      }
      out.protocol.record(EventKind::Q5, q5.hex(), false, "validation predictions");
      const ResidualPool pool = compute_residuals(deployed, truss);
      Digest r5;
      for (const auto& r : pool.residuals)
        for (double v : r) r5.add(v);
      out.protocol.record(EventKind::R5, r5.hex(), false, "validation virtual readings");
      GapDistributionSet gaps = fit_gap_distributions(pool);
      gaps.seed = derive_seed(plan.split_seed, "finetune");

      stage = 3;
      const auto subset = finetune_subset(pr.split.train, plan.finetune_fraction,
                                          derive_seed(plan.split_seed, "finetune-subset"));
      const auto data = build_finetune_dataset(subset, gaps, gaps.seed);
      auto [tuned, run] = fine_tune(out.pretrained, data, plan.finetune_epochs, gaps.seed, plan.finetune_learning_rate);
      out.model = std::move(tuned);
      finetune_s = run.seconds;
      out.row.gap_digest = hex64(gaps.digest());
      out.gaps = std::move(gaps);
    }

    if (plan.loi == LoI::C) {
      stage = 4;
      const Seed world_seed = derive_seed(plan.split_seed, "world/validation");
      for (const auto& w : validation) {
        const DetachResult d = detach(w.physical, *out.gaps, out.model, truss);
        if (!is_novel(d.detached, out.repository.manifest()).novel) continue;
        RepositoryRecord rec;
        rec.config = d.predicted;
        rec.sensors = d.detached;
        rec.provenance = Provenance::DeploymentDetached;
        rec.seed = world_seed;
        out.repository.augment(std::move(rec));
        ++out.row.novel_count;
      }
    }

    stage = 5;
    const auto test_physicals = physicals_of(out.test);
    out.evaluation = evaluate(test_physicals, out.model, truss);
    Digest q5, r5;
    for (const auto& c : out.evaluation.predicted) q5.add(c);
    for (const auto& v : out.evaluation.virtual_at_prediction) r5.add(v);
    out.protocol.record(EventKind::Q5, q5.hex(), false, "test predictions");
    out.protocol.record(EventKind::R5, r5.hex(), false, "test virtual readings");

    out.row.loi = plan.loi;
    out.row.epochs = plan.epochs;
    out.row.split_seed = plan.split_seed;
    out.row.mse = out.evaluation.mse;
    out.row.finetune_s = finetune_s;
    out.row.train_s = pr.training.seconds + finetune_s;
    return out;
  } catch (const std::exception& e) {
    out.protocol.record_fault(e.what());
    throw Error(std::string("LoI ") + to_string(plan.loi) + " [" + stage_name(stage) + "]: " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Second-generation pre-training

SecondGenerationResult second_generation_pretrain(const Repository& original, const Repository& augmented,
                                                  const DigitalTwin& twin, Seed fresh_seed,
                                                  std::size_t fresh_instances) {
  if (!twin.truss || !twin.regressor) throw ArgumentError("second_generation_pretrain: twin not configured");
  SecondGenerationResult r;
  r.fresh_seed = fresh_seed;
  r.original_records = original.size();
  r.augmented_records = augmented.size();
  if (r.augmented_records == r.original_records)
    r.warning = "augmented repository has the same size as the original";
  else if (r.augmented_records < r.original_records)
    throw ArgumentError("second_generation_pretrain: augmented repository is smaller than the original");

  const GapInjectionSpec spec = default_gap_spec(derive_seed(fresh_seed, "gap-spec"));
  const auto configs = sample_configurations(twin.structure, fresh_instances, derive_seed(fresh_seed, "configs"));
  Rng rng = make_rng(derive_seed(fresh_seed, "world"));
  std::vector<SensorVector> physicals;
  physicals.reserve(configs.size());
  for (const auto& c : configs) physicals.push_back(observe(*twin.truss, c, spec, rng).physical);

  const Seed train_seed = derive_seed(fresh_seed, "pretrain");
  const auto score = [&](const Repository& repo) {
    const auto records = repo.records();
    auto [model, run] = pretrain(to_examples(records), *twin.regressor, 1, train_seed, twin.truss->bounds());
    return evaluate_mse(physicals, model, *twin.truss);
  };
  r.mse_original = score(original);
  r.mse_augmented = score(augmented);
  return r;
}

// ---------------------------------------------------------------------------
// Instance report

InstanceReport instance_report(std::size_t timestep, LoI loi, const SensorVector& physical,
                               const RegressionModel& model, const TrussModel& truss) {
  InstanceReport rep;
  rep.loi = loi;
  rep.timestep = timestep;
  const SensorVector v = simulate(truss, predict(model, physical));
  for (std::size_t j = 0; j < kSensorCount; ++j) rep.rows.push_back({j, physical.values[j], v.values[j]});
  rep.mse = instance_mse(physical, v);
  return rep;
}

InstanceReport instance_report(std::size_t timestep, const LoIRun& run) {
  if (timestep >= run.test.size())
    throw ArgumentError("instance_report: timestep " + std::to_string(timestep) + " out of range [0, " +
                        std::to_string(run.test.size()) + ")");
  InstanceReport rep;
  rep.loi = run.row.loi;
  rep.timestep = timestep;
  const auto& physical = run.test[timestep].physical;
  const auto& v = run.evaluation.virtual_at_prediction[timestep];
  for (std::size_t j = 0; j < kSensorCount; ++j) rep.rows.push_back({j, physical.values[j], v.values[j]});
  rep.mse = run.evaluation.per_instance[timestep];
  return rep;
}

std::string InstanceReport::to_csv() const {
  std::ostringstream out;
  out.precision(17);
  out << "# loi=" << to_string(loi) << " timestep=" << timestep << " mse_m2=" << mse << "\n";
  out << "sensor,physical_m,simulated_m\n";
  for (const auto& r : rows) out << r.sensor << ',' << r.physical << ',' << r.simulated << '\n';
  return out.str();
}

// ---------------------------------------------------------------------------
// Grids

Seed split_seed_for(Seed master, std::size_t split_index) { return derive_seed(master, "split", split_index); }

std::vector<LoIReportRow> run_grid(const GridSpec& grid, const ExperimentPlan& base, const Repository& repo,
                                   const DigitalTwin& twin, const GapInjectionSpec& spec) {
  struct Cell {
    LoI loi;
    int epochs;
    std::size_t split;
  };
  // Execution is split-major with LoIs adjacent; rows land in (LoI, epochs,
  // split) order.
  std::vector<Cell> cells;
  std::vector<std::size_t> slot;
  const std::size_t ne = grid.epochs.size(), ns = grid.splits;
  for (std::size_t s = 0; s < ns; ++s)
    for (std::size_t e = 0; e < ne; ++e)
      for (std::size_t l = 0; l < grid.lois.size(); ++l) {
        cells.push_back({grid.lois[l], grid.epochs[e], s});
        slot.push_back((l * ne + e) * ns + s);
      }

  std::vector<LoIReportRow> rows(cells.size());
  std::atomic<std::size_t> next{0};
  std::mutex err_mutex;
  std::exception_ptr first_error;
  const auto worker = [&] {
    for (std::size_t i = next++; i < cells.size(); i = next++) {
      try {
        ExperimentPlan plan = base;
        plan.loi = cells[i].loi;
        plan.epochs = cells[i].epochs;
        plan.split_seed = split_seed_for(base.master_seed, cells[i].split);
        rows[slot[i]] = run_loi(plan, repo, twin, spec).row;
      } catch (...) {
        std::lock_guard lock(err_mutex);
        if (!first_error) first_error = std::current_exception();
        next = cells.size();
      }
    }
  };
  const unsigned jobs = std::max(1u, grid.jobs);
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::thread> threads;
    for (unsigned t = 0; t < jobs; ++t) threads.emplace_back(worker);
    for (auto& t : threads) t.join();
  }
  if (first_error) std::rethrow_exception(first_error);
  return rows;
}

std::vector<CellSummary> summarize(std::span<const LoIReportRow> rows) {
  std::vector<CellSummary> out;
  for (const auto& r : rows) {
    auto it = std::find_if(out.begin(), out.end(),
                           [&](const CellSummary& c) { return c.loi == r.loi && c.epochs == r.epochs; });
    if (it == out.end()) {
      out.push_back({r.loi, r.epochs, 0.0, 0.0, 0.0, 0.0, 0});
      it = std::prev(out.end());
    }
    it->mean_mse += r.mse;
    it->mean_train_s += r.train_s;
    it->mean_finetune_s += r.finetune_s;
    it->mean_novel += static_cast<double>(r.novel_count);
    ++it->splits;
  }
  for (auto& c : out) {
    const double n = static_cast<double>(c.splits);
    c.mean_mse /= n;
    c.mean_train_s /= n;
    c.mean_finetune_s /= n;
    c.mean_novel /= n;
  }
  return out;
}

}  // namespace dtgap
