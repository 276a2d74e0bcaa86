#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "dtgap/error.hpp"
#include "dtgap/orchestrator.hpp"
#include "support.hpp"

using namespace dtgap;
using dtgap::testing::twin;

namespace {

constexpr Seed kMaster = 20240601;

// The frozen default benchmark: 2000 design records from the master seed.
const Repository& benchmark_repo() {
  static const Repository repo = [] {
    auto r = Repository::in_memory();
    r.ingest(generate_design_records(twin(), 2000, derive_seed(kMaster, "design-data")));
    return r;
  }();
  return repo;
}

const GapInjectionSpec& benchmark_spec() {
  static const GapInjectionSpec spec = default_gap_spec(derive_seed(kMaster, "gap-spec"));
  return spec;
}

ExperimentPlan plan(LoI loi, int epochs, std::size_t split = 0) {
  ExperimentPlan p;
  p.loi = loi;
  p.epochs = epochs;
  p.master_seed = kMaster;
  p.split_seed = split_seed_for(kMaster, split);
  return p;
}

std::vector<EventKind> kinds(const ProtocolState& s) {
  std::vector<EventKind> out;
  for (const auto& e : s.transcript()) out.push_back(e.kind);
  return out;
}

std::vector<ProtocolEvent> events(std::initializer_list<std::pair<EventKind, bool>> list) {
  std::vector<ProtocolEvent> out;
  for (const auto& [k, f] : list) out.push_back({k, {}, f, {}});
  return out;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

LoIReportRow without_timing(LoIReportRow r) {
  r.train_s = r.finetune_s = 0.0;
  return r;
}

bool same_row(const LoIReportRow& a, const LoIReportRow& b) {
  const auto x = without_timing(a), y = without_timing(b);
  return x.loi == y.loi && x.epochs == y.epochs && x.split_seed == y.split_seed && x.mse == y.mse &&
         x.novel_count == y.novel_count && x.gap_digest == y.gap_digest;
}

}  // namespace

using E = EventKind;

TEST_CASE("protocol with a pre-populated repository skips Q3") {
  auto repo = benchmark_repo().snapshot();
  ProtocolState state;
  const auto run = run_protocol(repo, twin(), plan(LoI::A, 1), state);
  CHECK(kinds(state) == std::vector<E>{E::Q1, E::R1, E::Q2, E::R2, E::Q4, E::R4});
  CHECK(state.transcript()[3].flag);
  CHECK(state.phase() == Phase::Pretrained);
  CHECK(transcript_accepted(state.transcript()));
  CHECK(repo.size() == 2000);
  CHECK(run.training.epochs == 1);
}

TEST_CASE("protocol with an empty repository simulates design data") {
  auto repo = Repository::in_memory();
  auto p = plan(LoI::A, 1);
  p.dataset_size = 100;
  ProtocolState state;
  const auto run = run_protocol(repo, twin(), p, state);
  CHECK(kinds(state) == std::vector<E>{E::Q1, E::R1, E::Q2, E::R2, E::Q3, E::R3, E::Q4, E::R4});
  CHECK_FALSE(state.transcript()[3].flag);
  CHECK(transcript_accepted(state.transcript()));
  CHECK(repo.size() == 100);
  CHECK(repo.has_design_data());
  CHECK(run.split.train.size() == 50);
}

TEST_CASE("protocol reruns give identical transcripts") {
  for (bool populated : {true, false}) {
    auto make = [&] {
      auto repo = populated ? benchmark_repo().snapshot() : Repository::in_memory();
      auto p = plan(LoI::A, 1);
      p.dataset_size = 100;
      ProtocolState s;
      run_protocol(repo, twin(), p, s);
      return s.transcript();
    };
    CHECK(make() == make());
  }
}

TEST_CASE("capability failure halts after R1") {
  DigitalTwin bare = twin();
  bare.regressor.reset();
  auto repo = Repository::in_memory();
  ProtocolState state;
  try {
    run_protocol(repo, bare, plan(LoI::A, 1), state);
    FAIL("expected ProtocolError");
  } catch (const ProtocolError& e) {
    CHECK(std::string(e.what()) == "DT cannot compute reality gaps");
  }
  CHECK(kinds(state) == std::vector<E>{E::Q1, E::R1, E::Fault});
  CHECK_FALSE(state.transcript()[1].flag);
  CHECK(state.faulted());
  CHECK(transcript_accepted(state.transcript()));
  CHECK(repo.size() == 0);
}

TEST_CASE("step errors are recorded before they propagate") {
  auto repo = Repository::in_memory();
  auto p = plan(LoI::A, 1);
  p.dataset_size = 5;
  ProtocolState state;
  CHECK_THROWS_AS(run_protocol(repo, twin(), p, state), InsufficientData);
  CHECK(kinds(state) == std::vector<E>{E::Q1, E::R1, E::Q2, E::R2, E::Q3, E::R3, E::Q4, E::Fault});
  CHECK(transcript_accepted(state.transcript()));
  CHECK_THROWS_AS(state.record(E::R4), ProtocolError);

  auto bad = plan(LoI::B, 0);
  try {
    run_loi(bad, benchmark_repo(), twin(), benchmark_spec());
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("LoI B [protocol]") == 0);
  }
}

TEST_CASE("state machine rejects out-of-order events") {
  ProtocolState s;
  CHECK_THROWS_AS(s.record(E::R1), ProtocolError);
  s.record(E::Q1);
  s.record(E::R1, {}, true);
  CHECK(s.phase() == Phase::CapabilityConfirmed);
  s.record(E::Q2);
  s.record(E::R2, {}, true);
  CHECK(s.phase() == Phase::DesignDataChecked);
  CHECK_THROWS_AS(s.record(E::Q3), ProtocolError);
  CHECK_THROWS_AS(s.record(E::Q5), ProtocolError);
  s.record(E::Q4);
  s.record(E::R4);
  CHECK(s.phase() == Phase::Pretrained);
  s.record(E::Q5);
  CHECK(s.phase() == Phase::Deployed);
  CHECK_THROWS_AS(s.record(E::Q5), ProtocolError);
  s.record(E::R5);
  s.record(E::Q5);
  s.record(E::R5);
  CHECK(transcript_accepted(s.transcript()));

  ProtocolState refused;
  refused.record(E::Q1);
  refused.record(E::R1, {}, false);
  CHECK_THROWS_AS(refused.record(E::Q2), ProtocolError);

  ProtocolState missing;
  missing.record(E::Q1);
  missing.record(E::R1, {}, true);
  missing.record(E::Q2);
  missing.record(E::R2, {}, false);
  CHECK_THROWS_AS(missing.record(E::Q4), ProtocolError);
  missing.record(E::Q3);
  missing.record(E::R3);
  CHECK(missing.phase() == Phase::DesignDataSimulated);
  missing.record(E::Q4);
}

TEST_CASE("transcript grammar") {
  const bool T = true, F = false;
  SUBCASE("accepts") {
    CHECK(transcript_accepted(events({{E::Q1, F}, {E::R1, T}, {E::Q2, F}, {E::R2, T}, {E::Q4, F}, {E::R4, F}})));
    CHECK(transcript_accepted(events({{E::Q1, F}, {E::R1, T}, {E::Q2, F}, {E::R2, F}, {E::Q3, F}, {E::R3, F},
                                      {E::Q4, F}, {E::R4, F}, {E::Q5, F}, {E::R5, F}, {E::Q5, F}, {E::R5, F}})));
    CHECK(transcript_accepted(events({{E::Q1, F}, {E::R1, F}, {E::Fault, F}})));
    CHECK(transcript_accepted(events({{E::Fault, F}})));
    CHECK(transcript_accepted(events({{E::Q1, F}, {E::R1, T}, {E::Q2, F}, {E::R2, T}, {E::Q4, F}, {E::R4, F},
                                      {E::Q5, F}, {E::Fault, F}})));
  }
  SUBCASE("rejects") {
    CHECK_FALSE(transcript_accepted(events({})));
    CHECK_FALSE(transcript_accepted(events({{E::Q1, F}, {E::R1, T}, {E::Q2, F}, {E::R2, T}, {E::Q4, F}})));
    // Q3 after a positive R2.
    CHECK_FALSE(transcript_accepted(events({{E::Q1, F}, {E::R1, T}, {E::Q2, F}, {E::R2, T}, {E::Q3, F},
                                            {E::R3, F}, {E::Q4, F}, {E::R4, F}})));
    // Missing Q3/R3 after a negative R2.
    CHECK_FALSE(
        transcript_accepted(events({{E::Q1, F}, {E::R1, T}, {E::Q2, F}, {E::R2, F}, {E::Q4, F}, {E::R4, F}})));
    // Continuing after a refused capability check.
    CHECK_FALSE(transcript_accepted(
        events({{E::Q1, F}, {E::R1, F}, {E::Q2, F}, {E::R2, T}, {E::Q4, F}, {E::R4, F}})));
    // Deployment before pre-training.
    CHECK_FALSE(transcript_accepted(events({{E::Q1, F}, {E::R1, T}, {E::Q2, F}, {E::R2, T}, {E::Q5, F},
                                            {E::R5, F}, {E::Q4, F}, {E::R4, F}})));
    // Events after a fault.
    CHECK_FALSE(transcript_accepted(events({{E::Q1, F}, {E::Fault, F}, {E::R1, T}})));
    CHECK_FALSE(transcript_accepted(events({{E::Q1, F}, {E::R1, T}, {E::Q2, F}, {E::R2, T}, {E::Q4, F},
                                            {E::R4, F}, {E::Q5, F}})));
  }
}

TEST_CASE("split sizes and partition") {
  const auto recs = generate_design_records(twin(), 10, 1);
  const auto s = split_dataset(recs, 3);
  CHECK(s.train.size() == 5);
  CHECK(s.validation.size() == 2);
  CHECK(s.test.size() == 3);

  const auto many = generate_design_records(twin(), 2000, 2);
  const auto a = split_dataset(many, 4), b = split_dataset(many, 5), a2 = split_dataset(many, 4);
  CHECK(a.train.size() == 1000);
  CHECK(a.validation.size() == 400);
  CHECK(a.test.size() == 600);
  CHECK(a.train == a2.train);
  CHECK(a.test == a2.test);
  CHECK(b.train.size() == a.train.size());
  CHECK_FALSE(a.train == b.train);

  std::multiset<std::string> in, out;
  for (const auto& r : many) in.insert(r.to_json_line());
  for (const auto* part : {&a.train, &a.validation, &a.test})
    for (const auto& r : *part) out.insert(r.to_json_line());
  CHECK(in == out);

  CHECK(split_dataset(generate_design_records(twin(), 11, 6), 1).test.size() == 4);
  CHECK_THROWS_AS(split_dataset(generate_design_records(twin(), 9, 7), 1), InsufficientData);
}

TEST_CASE("plan validation") {
  auto p = plan(LoI::A, 1);
  p.fractions = {0.5, 0.2, 0.2};
  CHECK_THROWS_AS(p.validate(), ArgumentError);
  p = plan(LoI::A, 0);
  CHECK_THROWS_AS(p.validate(), ArgumentError);
  p = plan(LoI::A, 1);
  p.finetune_fraction = 0.0;
  CHECK_THROWS_AS(p.validate(), ArgumentError);
  CHECK(loi_from_string("b") == LoI::B);
  CHECK_THROWS_AS(loi_from_string("D"), ArgumentError);
}

TEST_CASE("evaluate_mse") {
  const auto t = twin();
  const auto recs = generate_design_records(t, 200, 8);
  const auto model = pretrain(to_examples(recs), *t.regressor, 2, 9, t.truss->bounds()).first;

  SUBCASE("physical equal to virtual at the predicted config scores 0") {
    std::vector<SensorVector> phys;
    for (const auto& r : recs) {
      auto v = simulate(*t.truss, predict(model, r.sensors));
      // One fixed-point step: readings that reproduce themselves.
      phys.push_back(v);
    }
    const auto ev = evaluate(phys, model, *t.truss);
    for (std::size_t i = 0; i < phys.size(); ++i)
      if (simulate(*t.truss, predict(model, phys[i])) == phys[i]) CHECK(ev.per_instance[i] == 0.0);
    SensorVector v = simulate(*t.truss, predict(model, recs[0].sensors));
    CHECK(instance_mse(v, v) == 0.0);
  }
  SUBCASE("constant offset with perfect prediction gives c squared") {
    const double c = 2.5e-4;
    auto v = recs[0].sensors;
    auto p = v;
    for (auto& x : p.values) x += c;
    CHECK(instance_mse(p, v) == doctest::Approx(c * c).epsilon(1e-9));
  }
  SUBCASE("matches a brute-force double loop on 5 instances") {
    Rng rng = make_rng(10);
    const auto spec = default_gap_spec(11);
    std::vector<SensorVector> phys;
    for (int i = 0; i < 5; ++i) phys.push_back(observe(*t.truss, recs[static_cast<std::size_t>(i)].config, spec, rng).physical);
    long double sum = 0;
    for (const auto& x : phys) {
      const auto cfg = predict(model, x);
      const auto v = simulate(*t.truss, cfg);
      for (std::size_t j = 0; j < kSensorCount; ++j) sum += (long double)(x.values[j] - v.values[j]) * (x.values[j] - v.values[j]);
    }
    const double brute = static_cast<double>(sum / (5.0L * kSensorCount));
    CHECK(evaluate_mse(phys, model, *t.truss) == doctest::Approx(brute).epsilon(1e-12));
  }
  CHECK_THROWS_AS(evaluate_mse({}, model, *t.truss), ArgumentError);
}

namespace {

struct BenchmarkCells {
  LoIRun a, b, c;
};

const BenchmarkCells& benchmark_cells() {
  static const BenchmarkCells cells{run_loi(plan(LoI::A, 5), benchmark_repo(), twin(), benchmark_spec()),
                                    run_loi(plan(LoI::B, 5), benchmark_repo(), twin(), benchmark_spec()),
                                    run_loi(plan(LoI::C, 5), benchmark_repo(), twin(), benchmark_spec())};
  return cells;
}

}  // namespace

TEST_CASE("default benchmark, 5 epochs: B beats A") {
  const auto& [a, b, c] = benchmark_cells();
  MESSAGE("split 0: A " << a.row.mse << ", B " << b.row.mse << ", C " << c.row.mse << ", novel "
                        << c.row.novel_count);
  CHECK(b.row.mse < a.row.mse);
}

TEST_CASE("LoI cells on the default benchmark") {
  const auto t = twin();
  const auto& [a, b, c] = benchmark_cells();

  SUBCASE("row invariants") {
    CHECK(a.row.finetune_s == 0.0);
    CHECK(a.row.novel_count == 0);
    CHECK(a.row.gap_digest.empty());
    CHECK(a.row.train_s > 0.0);
    CHECK(b.row.finetune_s > 0.0);
    CHECK(b.row.train_s >= b.row.finetune_s);
    CHECK(b.row.gap_digest == hex64(b.gaps->digest()));
    CHECK(c.row.gap_digest == b.row.gap_digest);
    for (const auto* r : {&a, &b, &c}) {
      CHECK(std::isfinite(r->row.mse));
      CHECK(transcript_accepted(r->protocol.transcript()));
    }
  }
  SUBCASE("every LoI is scored by the same function") {
    for (const auto* r : {&a, &b, &c}) {
      std::vector<SensorVector> phys;
      for (const auto& w : r->test) phys.push_back(w.physical);
      CHECK(r->row.mse == evaluate_mse(phys, r->model, *t.truss));
    }
  }
  SUBCASE("C evaluates B's model and augments its private repository") {
    CHECK(c.model == b.model);
    CHECK(c.row.mse == b.row.mse);
    CHECK(c.repository.size() == 2000 + c.row.novel_count);
    CHECK(benchmark_repo().size() == 2000);
    const auto added = c.repository.query({Provenance::DeploymentDetached, {kTagNovelCritical}, {}});
    CHECK(added.size() == c.row.novel_count);
  }
  SUBCASE("Q5/R5 only after pre-training, Q3 absent for a populated repository") {
    const auto k = kinds(c.protocol);
    CHECK(std::find(k.begin(), k.end(), E::Q3) == k.end());
    CHECK(std::count(k.begin(), k.end(), E::Q5) == 2);
    const auto ka = kinds(a.protocol);
    CHECK(std::count(ka.begin(), ka.end(), E::Q5) == 1);
  }
  SUBCASE("instance reports") {
    const auto rep = instance_report(7, b);
    CHECK(rep.rows.size() == kSensorCount);
    CHECK(rep.mse == b.evaluation.per_instance[7]);
    CHECK(rep.mse == evaluate_mse(std::span(&b.test[7].physical, 1), b.model, *t.truss));
    const auto direct = instance_report(7, LoI::B, b.test[7].physical, b.model, *t.truss);
    CHECK(direct.mse == rep.mse);
    double peak = 0;
    for (const auto& r : rep.rows) peak = std::max({peak, std::abs(r.physical), std::abs(r.simulated)});
    CHECK(peak <= 0.012 * 3.0);
    CHECK_THROWS_AS(instance_report(b.test.size(), b), ArgumentError);
    const auto csv = rep.to_csv();
    CHECK(csv.find("sensor,physical_m,simulated_m\n") != std::string::npos);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 44);
  }
  SUBCASE("per-instance LoI ordering matches the run trend in the median") {
    CHECK(median(a.evaluation.per_instance) > median(b.evaluation.per_instance));
    CHECK(median(c.evaluation.per_instance) == median(b.evaluation.per_instance));
  }
}

TEST_CASE("zero-load instance reports zeros on both columns" * doctest::may_fail()) {
  const auto t = twin();
  const auto a = run_loi(plan(LoI::A, 1), benchmark_repo(), t, benchmark_spec());
  const auto rep = instance_report(0, LoI::A, SensorVector{}, a.model, *t.truss);
  double worst = 0;
  for (const auto& r : rep.rows) worst = std::max({worst, std::abs(r.physical), std::abs(r.simulated)});
  MESSAGE("largest simulated reading for an all-zero input " << worst);
  CHECK(worst == 0.0);
}

TEST_CASE("zero gap spec: LoIs agree and nothing is novel" * doctest::may_fail()) {
  const auto t = twin();
  const GapInjectionSpec zero;
  const auto a = run_loi(plan(LoI::A, 3), benchmark_repo(), t, zero);
  const auto b = run_loi(plan(LoI::B, 3), benchmark_repo(), t, zero);
  const auto c = run_loi(plan(LoI::C, 3), benchmark_repo(), t, zero);
  MESSAGE("A " << a.row.mse << ", B " << b.row.mse << ", C " << c.row.mse << ", novel " << c.row.novel_count);
  CHECK(std::abs(b.row.mse - a.row.mse) <= 0.1 * a.row.mse);
  CHECK(c.row.mse == b.row.mse);
  CHECK(c.row.novel_count == 0);
}

TEST_CASE("run_loi is deterministic apart from timing") {
  const auto t = twin();
  const auto x = run_loi(plan(LoI::C, 1, 3), benchmark_repo(), t, benchmark_spec());
  const auto y = run_loi(plan(LoI::C, 1, 3), benchmark_repo(), t, benchmark_spec());
  CHECK(same_row(x.row, y.row));
  CHECK(x.model == y.model);
  CHECK(x.repository.records() == y.repository.records());
  CHECK(x.protocol.transcript() == y.protocol.transcript());
}

TEST_CASE("second-generation pre-training") {
  const auto t = twin();
  const auto same = second_generation_pretrain(benchmark_repo(), benchmark_repo(), t, 1, 100);
  CHECK(same.mse_original == same.mse_augmented);
  CHECK_FALSE(same.warning.empty());
  CHECK(same.original_records == 2000);
  CHECK(same.augmented_records == 2000);
  CHECK(same.augmented_wins());

  const auto c = run_loi(plan(LoI::C, 1), benchmark_repo(), t, benchmark_spec());
  REQUIRE(c.row.novel_count > 0);
  const auto r = second_generation_pretrain(benchmark_repo(), c.repository, t, 2, 100);
  CHECK(r.augmented_records == 2000 + c.row.novel_count);
  CHECK(r.warning.empty());
  CHECK(std::isfinite(r.mse_original));
  CHECK_THROWS_AS(second_generation_pretrain(c.repository, benchmark_repo(), t, 2, 100), ArgumentError);
}

TEST_CASE("grid rows: count, order and worker-count independence") {
  const auto t = twin();
  GridSpec g;
  g.epochs = {1, 3};
  g.splits = 2;
  ExperimentPlan base;
  base.master_seed = kMaster;
  const auto rows = run_grid(g, base, benchmark_repo(), t, benchmark_spec());
  REQUIRE(rows.size() == 3 * 2 * 2);
  std::size_t i = 0;
  for (LoI l : g.lois)
    for (int e : g.epochs)
      for (std::size_t s = 0; s < g.splits; ++s, ++i) {
        CHECK(rows[i].loi == l);
        CHECK(rows[i].epochs == e);
        CHECK(rows[i].split_seed == split_seed_for(kMaster, s));
      }
  g.jobs = 3;
  const auto parallel = run_grid(g, base, benchmark_repo(), t, benchmark_spec());
  for (std::size_t k = 0; k < rows.size(); ++k) CHECK(same_row(rows[k], parallel[k]));

  const auto summary = summarize(rows);
  REQUIRE(summary.size() == 6);
  CHECK(summary[0].loi == LoI::A);
  CHECK(summary[0].epochs == 1);
  CHECK(summary[0].splits == 2);
  CHECK(summary[0].mean_mse == doctest::Approx((rows[0].mse + rows[1].mse) / 2));
}
