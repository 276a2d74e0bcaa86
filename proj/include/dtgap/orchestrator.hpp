#pragma once

#include <array>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dtgap/gap_world.hpp"
#include "dtgap/regressor.hpp"
#include "dtgap/repository.hpp"
#include "dtgap/rga.hpp"
#include "dtgap/seeding.hpp"
#include "dtgap/truss.hpp"

namespace dtgap {

// ---------------------------------------------------------------------------
// Query/response protocol between the RGA module and the digital twin.
//
//   Q1 R1 Q2 R2 [Q3 R3] Q4 R4 (Q5 R5)*
//
// Q1/R1: can the twin compute reality gaps (R1 carries the answer).
// Q2/R2: are design-phase simulation records present (R2 carries it).
// Q3/R3: simulate and store design data; present iff R2 was false.
// Q4/R4: request design data, pre-train the regressor.
// Q5/R5: deployment: predicted configurations out, virtual sensors back.
// A trailing Fault event records the failing step before an error escapes.

enum class Phase { Init, CapabilityConfirmed, DesignDataChecked, DesignDataSimulated, Pretrained, Deployed };
enum class EventKind { Q1, R1, Q2, R2, Q3, R3, Q4, R4, Q5, R5, Fault };

std::string to_string(Phase p);
std::string to_string(EventKind k);

struct ProtocolEvent {
  EventKind kind = EventKind::Q1;
  std::string digest;  // hex FNV-1a of the payload
  bool flag = false;   // answer carried by R1 and R2
  std::string note;

  bool operator==(const ProtocolEvent&) const = default;
};

class ProtocolState {
 public:
  Phase phase() const { return phase_; }
  const std::vector<ProtocolEvent>& transcript() const { return transcript_; }

  // Appends an event; throws ProtocolError if it breaks the grammar.
  void record(EventKind kind, std::string digest = {}, bool flag = false, std::string note = {});
  void record_fault(const std::string& what);
  bool faulted() const { return !transcript_.empty() && transcript_.back().kind == EventKind::Fault; }

 private:
  Phase phase_ = Phase::Init;
  std::vector<ProtocolEvent> transcript_;
};

// Independent validator of a finished transcript against the grammar.
bool transcript_accepted(std::span<const ProtocolEvent> events);

// ---------------------------------------------------------------------------
// Experiment description

enum class LoI { A, B, C };
std::string to_string(LoI l);
LoI loi_from_string(const std::string& s);

// Everything the twin exposes to the RGA module. R1 is true iff both the
// truss model and a regressor configuration are registered.
struct DigitalTwin {
  std::shared_ptr<const TrussModel> truss;
  StructureParams structure;
  std::optional<Hyperparams> regressor;
};

struct ExperimentPlan {
  LoI loi = LoI::A;
  int epochs = 1;
  Seed master_seed = 0;
  Seed split_seed = 0;
  std::array<double, 3> fractions{0.5, 0.2, 0.3};
  std::size_t dataset_size = 2000;  // records simulated on a Q3 branch
  int finetune_epochs = 2;
  // Share of the training split (seeded subsample) that, with the
  // estimated gap added, forms the fine-tuning set.
  double finetune_fraction = 0.05;
  std::optional<double> finetune_learning_rate;

  void validate() const;
};

// ---------------------------------------------------------------------------
// Data plumbing

struct DatasetSplit {
  std::vector<RepositoryRecord> train;
  std::vector<RepositoryRecord> validation;
  std::vector<RepositoryRecord> test;
};

// Seeded shuffle, then floor(f0 * n) / floor(f1 * n) / remainder.
DatasetSplit split_dataset(std::span<const RepositoryRecord> records, Seed seed,
                           const std::array<double, 3>& fractions = {0.5, 0.2, 0.3});

// `count` sampled configurations simulated into design-sim records tagged
// with `seed`.
std::vector<RepositoryRecord> generate_design_records(const DigitalTwin& twin, std::size_t count, Seed seed,
                                                      unsigned jobs = 1);

std::vector<Example> to_examples(std::span<const RepositoryRecord> records);

// Physical observations of each record's configuration, drawn in order from
// one stream seeded by `seed`.
std::vector<WorldInstance> observe_all(const TrussModel& truss, std::span<const RepositoryRecord> records,
                                       const GapInjectionSpec& spec, Seed seed);

// ---------------------------------------------------------------------------
// Metrics

// Squared error of one instance averaged over sensors, against the virtual
// readings at the predicted configuration.
double instance_mse(const SensorVector& physical, const SensorVector& virtual_at_prediction);

struct Evaluation {
  double mse = 0.0;
  std::vector<AssetConfiguration> predicted;
  std::vector<SensorVector> virtual_at_prediction;
  std::vector<double> per_instance;
};

// Every LoI is scored through this one function.
Evaluation evaluate(std::span<const SensorVector> physicals, const RegressionModel& model, const TrussModel& truss);
double evaluate_mse(std::span<const SensorVector> physicals, const RegressionModel& model, const TrussModel& truss);

// ---------------------------------------------------------------------------
// Runs

struct ProtocolRun {
  RegressionModel model;
  TrainingRun training;
  DatasetSplit split;
};

// Q1..R4 against `repo`. Events are appended to `state`; on failure a Fault
// event is recorded before the error propagates.
ProtocolRun run_protocol(Repository& repo, const DigitalTwin& twin, const ExperimentPlan& plan,
                         ProtocolState& state);

struct LoIReportRow {
  LoI loi = LoI::A;
  int epochs = 0;
  Seed split_seed = 0;
  double mse = 0.0;        // m^2
  double train_s = 0.0;    // pretrain + fine-tune wall-clock
  double finetune_s = 0.0;
  std::size_t novel_count = 0;
  std::string gap_digest;  // empty for LoI A
};

struct LoIRun {
  LoIReportRow row;
  ProtocolState protocol;
  RegressionModel pretrained;
  RegressionModel model;  // model used for evaluation
  std::optional<GapDistributionSet> gaps;
  std::vector<WorldInstance> test;
  Evaluation evaluation;
  Repository repository;  // the cell's private copy; augmented under LoI C
};

LoIRun run_loi(const ExperimentPlan& plan, const Repository& repo, const DigitalTwin& twin,
               const GapInjectionSpec& spec);

struct SecondGenerationResult {
  Seed fresh_seed = 0;
  std::size_t original_records = 0;
  std::size_t augmented_records = 0;
  double mse_original = 0.0;
  double mse_augmented = 0.0;
  std::string warning;

  bool augmented_wins() const { return mse_augmented <= mse_original; }
};

// Pre-trains one model per repository (1 epoch, same seed and
// hyperparameters, all records) and scores both on a fresh asset whose gap
// spec and configurations derive from `fresh_seed`.
SecondGenerationResult second_generation_pretrain(const Repository& original, const Repository& augmented,
                                                  const DigitalTwin& twin, Seed fresh_seed,
                                                  std::size_t fresh_instances = 600);

struct InstanceRow {
  std::size_t sensor = 0;
  double physical = 0.0;
  double simulated = 0.0;
};

struct InstanceReport {
  LoI loi = LoI::A;
  std::size_t timestep = 0;
  std::vector<InstanceRow> rows;
  double mse = 0.0;

  std::string to_csv() const;
};

// One test-set time step of a finished run: physical readings next to the
// raw virtual readings at the predicted configuration.
InstanceReport instance_report(std::size_t timestep, const LoIRun& run);
InstanceReport instance_report(std::size_t timestep, LoI loi, const SensorVector& physical,
                               const RegressionModel& model, const TrussModel& truss);

// ---------------------------------------------------------------------------
// Grids

struct GridSpec {
  std::vector<LoI> lois{LoI::A, LoI::B, LoI::C};
  std::vector<int> epochs{1, 3, 5, 10};
  std::size_t splits = 10;
  unsigned jobs = 1;
};

Seed split_seed_for(Seed master, std::size_t split_index);

// Runs every (LoI, epochs, split) cell on an isolated copy of `repo`;
// rows come back ordered by (LoI, epochs, split index).
std::vector<LoIReportRow> run_grid(const GridSpec& grid, const ExperimentPlan& base, const Repository& repo,
                                   const DigitalTwin& twin, const GapInjectionSpec& spec);

struct CellSummary {
  LoI loi = LoI::A;
  int epochs = 0;
  double mean_mse = 0.0;
  double mean_train_s = 0.0;
  double mean_finetune_s = 0.0;
  double mean_novel = 0.0;
  std::size_t splits = 0;
};

// Means over splits per (LoI, epochs), in first-seen order.
std::vector<CellSummary> summarize(std::span<const LoIReportRow> rows);

}  // namespace dtgap
