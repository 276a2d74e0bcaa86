// dtgap: generate design data, run LoI grids, and report.
//
//   dtgap gen       --repo DIR [--size N] [--seed S] [--force]
//   dtgap run       [--loi A|B|C|all] [--splits N] [--epochs 1,3,5,10] [--jobs J]
//   dtgap instance  --loi L --timestep K
//   dtgap secondgen
//   dtgap report
//
// Layout of the output directory (DTGAP_OUT overrides --out):
//   report.csv, run_manifest.json, summary.txt, secondgen.csv,
//   instance_<L>_<K>.csv, artifacts/<L>/{model.json,test.jsonl,protocol.txt},
//   artifacts/C/repo/ (augmented repository).

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "dtgap/error.hpp"
#include "dtgap/gap_world.hpp"
#include "dtgap/orchestrator.hpp"
#include "dtgap/reports.hpp"
#include "dtgap/repository.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace dtgap;

namespace {

constexpr Seed kDefaultSeed = 20240601;

struct RunConfig {
  std::string structure_path;
  std::string gap_spec_path;
  std::string repo_dir;
  std::string out_dir = "out";
  Seed master_seed = kDefaultSeed;
  std::size_t dataset_size = 2000;
  std::size_t splits = 10;
  std::vector<int> epochs{1, 3, 5, 10};
  std::string loi = "all";
  unsigned jobs = 1;
  bool force = false;
  std::size_t timestep = 0;
};

void add_common(CLI::App* cmd, RunConfig& rc) {
  cmd->add_option("--structure", rc.structure_path, "structure config file (key = value)")->check(CLI::ExistingFile);
  cmd->add_option("--gap-spec", rc.gap_spec_path, "gap injection spec JSON (default: derived from the seed)")
      ->check(CLI::ExistingFile);
  cmd->add_option("--repo", rc.repo_dir, "repository directory (default: <out>/repo)");
  cmd->add_option("--out", rc.out_dir, "output directory")->capture_default_str();
  cmd->add_option("--seed", rc.master_seed, "master seed")->capture_default_str();
  cmd->add_flag("--force", rc.force, "overwrite existing outputs");
}

fs::path out_dir(const RunConfig& rc) {
  if (const char* env = std::getenv("DTGAP_OUT"); env && *env) return env;
  return rc.out_dir;
}

fs::path repo_dir(const RunConfig& rc) { return rc.repo_dir.empty() ? out_dir(rc) / "repo" : fs::path(rc.repo_dir); }

struct Inputs {
  DigitalTwin twin;
  GapInjectionSpec spec;
  RunStamp stamp;
};

Inputs load_inputs(const RunConfig& rc) {
  Inputs in;
  in.twin.structure = rc.structure_path.empty() ? StructureParams{} : StructureParams::load(rc.structure_path);
  in.twin.truss = std::make_shared<TrussModel>(TrussModel::pratt_bridge(in.twin.structure));
  in.twin.regressor = Hyperparams{};
  in.spec = rc.gap_spec_path.empty() ? default_gap_spec(derive_seed(rc.master_seed, "gap-spec"))
                                     : GapInjectionSpec::load(rc.gap_spec_path);
  in.stamp.master_seed = rc.master_seed;
  in.stamp.digests["structure"] = hex64(fnv1a(in.twin.structure.serialize()));
  in.stamp.digests["gap_spec"] = hex64(fnv1a(in.spec.to_json()));
  return in;
}

void refuse_overwrite(const fs::path& p, bool force) {
  if (fs::exists(p) && !force) throw ArgumentError(p.string() + " exists; pass --force to overwrite");
}

std::string repo_digest(const fs::path& dir) {
  const fs::path records = dir / "records.jsonl";
  return fs::exists(records) ? file_digest(records) : hex64(fnv1a(""));
}

std::vector<LoI> selected_lois(const std::string& s) {
  if (s == "all") return {LoI::A, LoI::B, LoI::C};
  return {loi_from_string(s)};
}

// Report CSV with the timing columns blanked.
std::string timing_free_digest(std::span<const LoIReportRow> rows, const RunStamp& stamp) {
  std::vector<LoIReportRow> copy(rows.begin(), rows.end());
  for (auto& r : copy) r.train_s = r.finetune_s = 0.0;
  return hex64(fnv1a(report_csv(copy, stamp)));
}

void save_test_instances(const fs::path& path, const std::vector<WorldInstance>& test) {
  std::ostringstream out;
  for (std::size_t k = 0; k < test.size(); ++k) {
    json j;
    j["k"] = k;
    j["config"] = test[k].config.to_array();
    j["physical"] = test[k].physical.values;
    out << j.dump() << '\n';
  }
  write_file_atomic(path, out.str());
}

std::vector<SensorVector> load_test_physicals(const fs::path& path) {
  std::istringstream in(read_file(path));
  std::vector<SensorVector> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const json j = json::parse(line);
      SensorVector s;
      s.domain = Domain::Physical;
      s.values = j.at("physical").get<std::array<double, kSensorCount>>();
      out.push_back(s);
    } catch (const json::exception& e) {
      throw SchemaError(path.string() + ":" + std::to_string(lineno) + ": " + e.what(), lineno);
    }
  }
  return out;
}

std::string transcript_text(const ProtocolState& state) {
  std::ostringstream out;
  for (const auto& e : state.transcript()) {
    out << to_string(e.kind);
    if (e.kind == EventKind::R1 || e.kind == EventKind::R2) out << (e.flag ? " true" : " false");
    if (!e.digest.empty()) out << ' ' << e.digest;
    if (!e.note.empty()) out << " # " << e.note;
    out << '\n';
  }
  return out.str();
}

// ---------------------------------------------------------------------------

int cmd_gen(const RunConfig& rc) {
  const Inputs in = load_inputs(rc);
  const fs::path dir = repo_dir(rc);
  if (fs::exists(dir / "records.jsonl") || fs::exists(dir / "manifest.json")) {
    if (!rc.force) throw ArgumentError("repository " + dir.string() + " exists; pass --force to overwrite");
    fs::remove(dir / "records.jsonl");
    fs::remove(dir / "manifest.json");
  }
  auto records = generate_design_records(in.twin, rc.dataset_size, derive_seed(rc.master_seed, "design-data"), rc.jobs);
  Repository repo = Repository::open(dir);
  const auto manifest = repo.ingest(records);

  json meta;
  meta["master_seed"] = rc.master_seed;
  meta["dataset_size"] = rc.dataset_size;
  meta["design_data_seed"] = derive_seed(rc.master_seed, "design-data");
  meta["digests"] = in.stamp.digests;
  meta["digests"]["records"] = repo_digest(dir);
  write_file_atomic(dir / "gen.json", meta.dump(2) + "\n");
  std::cout << "wrote " << manifest.count << " design-sim records to " << dir.string() << "\n";
  return 0;
}

int cmd_run(const RunConfig& rc) {
  Inputs in = load_inputs(rc);
  const fs::path out = out_dir(rc);
  const fs::path report_path = out / "report.csv";
  refuse_overwrite(report_path, rc.force);
  if (rc.epochs.empty() || rc.splits == 0) throw ArgumentError("empty epoch grid or zero splits");
  for (int e : rc.epochs)
    if (e < 1) throw ArgumentError("epochs must be positive");

  const fs::path rdir = repo_dir(rc);
  if (!fs::exists(rdir / "records.jsonl")) throw ArgumentError("no repository at " + rdir.string() + "; run gen first");
  Repository disk = Repository::open(rdir);
  const Repository repo = disk.snapshot();
  in.stamp.digests["records"] = repo_digest(rdir);

  GridSpec grid;
  grid.lois = selected_lois(rc.loi);
  grid.epochs = rc.epochs;
  grid.splits = rc.splits;
  grid.jobs = std::max(1u, rc.jobs);
  ExperimentPlan base;
  base.master_seed = rc.master_seed;
  base.dataset_size = rc.dataset_size;

  fs::create_directories(out);
  const auto rows = run_grid(grid, base, repo, in.twin, in.spec);

  // Split 0 at the largest budget is kept for instance/secondgen.
  json artifacts = json::object();
  const int max_epochs = *std::max_element(rc.epochs.begin(), rc.epochs.end());
  for (LoI l : grid.lois) {
    ExperimentPlan plan = base;
    plan.loi = l;
    plan.epochs = max_epochs;
    plan.split_seed = split_seed_for(rc.master_seed, 0);
    LoIRun r = run_loi(plan, repo, in.twin, in.spec);
    if (!transcript_accepted(r.protocol.transcript()))
      throw ProtocolError("LoI " + to_string(l) + " transcript rejected by the grammar");
    const fs::path adir = out / "artifacts" / to_string(l);
    fs::create_directories(adir);
    r.model.save(adir / "model.json");
    save_test_instances(adir / "test.jsonl", r.test);
    write_file_atomic(adir / "protocol.txt", transcript_text(r.protocol));
    json a;
    a["epochs"] = max_epochs;
    a["split_seed"] = plan.split_seed;
    a["test_mse_m2"] = r.evaluation.mse;
    a["model"] = file_digest(adir / "model.json");
    a["test"] = file_digest(adir / "test.jsonl");
    if (r.gaps) a["gap_estimate"] = hex64(r.gaps->digest());
    if (l == LoI::C) {
      const fs::path aug = adir / "repo";
      fs::remove_all(aug);
      Repository saved = Repository::open(aug);
      saved.ingest(r.repository.records());
      a["augmented_records"] = saved.size();
      a["repo"] = repo_digest(aug);
    }
    artifacts[to_string(l)] = a;
  }

  write_file_atomic(report_path, report_csv(rows, in.stamp));

  json manifest;
  manifest["master_seed"] = rc.master_seed;
  manifest["dataset_size"] = rc.dataset_size;
  manifest["splits"] = rc.splits;
  manifest["epochs"] = rc.epochs;
  json lois = json::array();
  for (LoI l : grid.lois) lois.push_back(to_string(l));
  manifest["lois"] = lois;
  json seeds = json::array();
  for (std::size_t s = 0; s < rc.splits; ++s) seeds.push_back(split_seed_for(rc.master_seed, s));
  manifest["split_seeds"] = seeds;
  manifest["digests"] = in.stamp.digests;
  manifest["report_digest_excluding_timing"] = timing_free_digest(rows, in.stamp);
  manifest["artifacts"] = artifacts;
  write_file_atomic(out / "run_manifest.json", manifest.dump(2) + "\n");

  const auto cells = summarize(rows);
  std::cout << summary_table(cells);
  std::cout << "wrote " << rows.size() << " rows to " << report_path.string() << "\n";
  return 0;
}

int cmd_instance(const RunConfig& rc) {
  const Inputs in = load_inputs(rc);
  const LoI loi = loi_from_string(rc.loi);
  const fs::path out = out_dir(rc);
  const fs::path adir = out / "artifacts" / to_string(loi);
  if (!fs::exists(adir / "model.json") || !fs::exists(adir / "test.jsonl"))
    throw ArgumentError("no run artifacts for LoI " + to_string(loi) + " under " + out.string());
  const auto model = RegressionModel::load(adir / "model.json");
  const auto physicals = load_test_physicals(adir / "test.jsonl");
  if (rc.timestep >= physicals.size())
    throw ArgumentError("timestep " + std::to_string(rc.timestep) + " out of range [0, " +
                        std::to_string(physicals.size()) + ")");
  const fs::path path = out / ("instance_" + to_string(loi) + "_" + std::to_string(rc.timestep) + ".csv");
  refuse_overwrite(path, rc.force);
  const auto rep = instance_report(rc.timestep, loi, physicals[rc.timestep], model, *in.twin.truss);
  RunStamp stamp = in.stamp;
  stamp.digests["model"] = file_digest(adir / "model.json");
  stamp.digests["test"] = file_digest(adir / "test.jsonl");
  const std::string text = stamp.comment_block() + rep.to_csv();
  write_file_atomic(path, text);
  std::cout << text;
  return 0;
}

int cmd_secondgen(const RunConfig& rc) {
  Inputs in = load_inputs(rc);
  const fs::path out = out_dir(rc);
  const fs::path aug_dir = out / "artifacts" / "C" / "repo";
  if (!fs::exists(aug_dir / "records.jsonl"))
    throw ArgumentError("no augmented repository at " + aug_dir.string() + "; run --loi C first");
  const fs::path rdir = repo_dir(rc);
  if (!fs::exists(rdir / "records.jsonl")) throw ArgumentError("no repository at " + rdir.string());
  const fs::path path = out / "secondgen.csv";
  refuse_overwrite(path, rc.force);

  const Repository original = Repository::open(rdir).snapshot();
  const Repository augmented = Repository::open(aug_dir).snapshot();
  in.stamp.digests["records"] = repo_digest(rdir);
  in.stamp.digests["augmented_records"] = repo_digest(aug_dir);
  std::vector<SecondGenerationResult> results;
  for (std::uint64_t k = 0; k < 10; ++k) {
    auto r = second_generation_pretrain(original, augmented, in.twin, derive_seed(rc.master_seed, "fresh", k));
    if (!r.warning.empty()) std::cerr << "secondgen: " << r.warning << "\n";
    results.push_back(r);
  }
  const std::string text = secondgen_csv(results, in.stamp);
  write_file_atomic(path, text);
  std::cout << text;
  return 0;
}

int cmd_report(const RunConfig& rc) {
  const fs::path out = out_dir(rc);
  const fs::path report_path = out / "report.csv";
  if (!fs::exists(report_path)) throw ArgumentError("" + report_path.string() + " not found; run first");
  const fs::path path = out / "summary.txt";
  refuse_overwrite(path, rc.force);
  const auto rows = parse_report_csv(read_file(report_path));
  const auto cells = summarize(rows);
  std::ostringstream text;
  text << "# source=" << report_path.filename().string() << " digest=" << file_digest(report_path) << "\n";
  text << summary_table(cells);
  write_file_atomic(path, text.str());
  std::cout << text.str();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Digital-twin reality gap analysis on a synthetic truss bridge"};
  app.require_subcommand(1);
  RunConfig rc;

  auto* gen = app.add_subcommand("gen", "simulate design-phase records into a repository");
  add_common(gen, rc);
  gen->add_option("--size", rc.dataset_size, "number of records")->capture_default_str();
  gen->add_option("--jobs", rc.jobs, "worker threads")->capture_default_str();

  auto* run = app.add_subcommand("run", "run the LoI grid and write report.csv");
  add_common(run, rc);
  run->add_option("--size", rc.dataset_size, "records simulated if the repository lacks design data")
      ->capture_default_str();
  run->add_option("--loi", rc.loi, "A, B, C or all")->check(CLI::IsMember({"A", "B", "C", "all"}))->capture_default_str();
  run->add_option("--splits", rc.splits, "random splits per cell")->capture_default_str();
  run->add_option("--epochs", rc.epochs, "epoch budgets")->delimiter(',')->capture_default_str();
  run->add_option("--jobs", rc.jobs, "cells run in parallel")->capture_default_str();

  auto* inst = app.add_subcommand("instance", "per-sensor physical vs simulated table for one test step");
  add_common(inst, rc);
  inst->add_option("--loi", rc.loi, "A, B or C")->required()->check(CLI::IsMember({"A", "B", "C"}));
  inst->add_option("--timestep", rc.timestep, "test-set index")->required();

  auto* sg = app.add_subcommand("secondgen", "second-generation pretrain on original vs augmented repository");
  add_common(sg, rc);

  auto* rep = app.add_subcommand("report", "summarize report.csv as an LoI x epochs table");
  add_common(rep, rc);

  CLI11_PARSE(app, argc, argv);

  const std::string name = app.get_subcommands().front()->get_name();
  try {
    if (name == "gen") return cmd_gen(rc);
    if (name == "run") return cmd_run(rc);
    if (name == "instance") return cmd_instance(rc);
    if (name == "secondgen") return cmd_secondgen(rc);
    return cmd_report(rc);
  } catch (const std::exception& e) {
    std::cerr << "dtgap " << name << ": " << e.what() << "\n";
    return 1;
  }
}
