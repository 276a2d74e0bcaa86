#pragma once

#include <array>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <memory>
#include <optional>
#include <shared_mutex>
#include <span>
#include <string>
#include <vector>

#include "dtgap/seeding.hpp"
#include "dtgap/truss.hpp"

namespace dtgap {

enum class Provenance { DesignSim, DeploymentDetached };

std::string to_string(Provenance p);
Provenance provenance_from_string(const std::string& s);

inline constexpr const char* kTagNovelCritical = "novel-critical";
inline constexpr const char* kTagForced = "forced-override";

struct RepositoryRecord {
  AssetConfiguration config;
  SensorVector sensors;
  Provenance provenance = Provenance::DesignSim;
  std::vector<std::string> tags;
  std::string timestamp;  // ISO 8601, assigned at insertion when empty
  Seed seed = 0;

  // One JSONL line (no trailing newline):
  // {"config":{"health":[5],"load_n":f,"load_pos":i,"temp_c":f},
  //  "sensors":[42],"prov":"design-sim"|"deployment-detached",
  //  "tags":[...],"ts":"...","seed":u64}
  std::string to_json_line() const;
  static RepositoryRecord from_json_line(const std::string& line, std::size_t lineno = 0);

  bool operator==(const RepositoryRecord&) const = default;
};

struct SensorSummary {
  double mean = 0.0;
  double std = 0.0;  // sample (n - 1) standard deviation; 0 when n < 2
  double m2 = 0.0;   // sum of squared deviations from the mean

  bool operator==(const SensorSummary&) const = default;
};

struct RepositoryManifest {
  static constexpr int kSchemaVersion = 1;

  int schema_version = kSchemaVersion;
  std::size_t count = 0;
  // Record count at the last full recomputation of the statistics.
  std::size_t watermark = 0;
  std::array<SensorSummary, kSensorCount> sensors{};

  // Welford update with one more record.
  void add(const SensorVector& s);
  // Two-pass recomputation over `records`.
  static RepositoryManifest recompute(std::span<const RepositoryRecord> records);

  std::string to_json() const;
  static RepositoryManifest from_json(const std::string& text);

  bool operator==(const RepositoryManifest&) const = default;
};

struct ConfigRange {
  std::size_t field = 0;  // index into AssetConfiguration::to_array()
  double lo = 0.0;
  double hi = 0.0;
};

struct RecordFilter {
  std::optional<Provenance> provenance;
  std::vector<std::string> tags;     // record must carry every listed tag
  std::vector<ConfigRange> ranges;   // inclusive, all must hold
};

// Insertion clock. The default logical clock starts at
// 2024-01-01T00:00:00Z and advances one second per record, so generated
// repositories are byte-reproducible. `system_clock_source` stamps real UTC time.
using ClockSource = std::function<std::string(std::size_t insertion_index)>;
std::string logical_timestamp(std::size_t insertion_index);
std::string system_clock_source(std::size_t insertion_index);

struct NoveltyResult {
  bool novel = false;
  std::vector<std::size_t> offending;
};

// Standard-normal 97.5% quantile.
inline constexpr double kZ975 = 1.959963984540054;

// Sensor j offends iff |x_j - mean_j| > kZ975 * std_j; novel iff any offends.
NoveltyResult is_novel(const SensorVector& reading, const RepositoryManifest& manifest);

// Append-only store of records plus a per-sensor summary manifest. Backed
// by `<dir>/records.jsonl` and `<dir>/manifest.json` when opened on a
// directory, memory-only otherwise. One writer, many readers.
class Repository {
 public:
  Repository();
  Repository(const Repository&) = delete;
  Repository& operator=(const Repository&) = delete;
  Repository(Repository&&) noexcept;
  Repository& operator=(Repository&&) noexcept;
  ~Repository();

  static Repository in_memory();
  // Opens (creating if needed) a repository directory.
  static Repository open(const std::filesystem::path& dir);

  // Appends records; returns the updated manifest. With `dedup`, records
  // identical (apart from timestamp) to a stored one are skipped.
  RepositoryManifest ingest(std::span<const RepositoryRecord> records, bool dedup = false);
  // Parses JSONL text and ingests it; malformed lines raise SchemaError
  // carrying the 1-based line number.
  RepositoryManifest ingest_jsonl(std::istream& in, bool dedup = false);

  std::vector<RepositoryRecord> query(const RecordFilter& filter = {}) const;

  // Adds a detached record as a new critical condition. Rejects records
  // that are not novel against the current manifest unless `force`.
  RepositoryManifest augment(RepositoryRecord detached, bool force = false);

  RepositoryManifest manifest() const;
  std::size_t size() const;
  bool has_design_data() const;
  std::vector<RepositoryRecord> records() const;
  // Memory-only copy of the current state.
  Repository snapshot() const;
  std::vector<std::string> log() const;

  void set_clock(ClockSource clock);
  const std::optional<std::filesystem::path>& directory() const { return dir_; }

 private:
  void append_locked(std::span<const RepositoryRecord> records, bool dedup);
  void persist_manifest_locked() const;

  mutable std::unique_ptr<std::shared_mutex> mutex_;
  std::optional<std::filesystem::path> dir_;
  std::vector<RepositoryRecord> records_;
  RepositoryManifest manifest_;
  ClockSource clock_;
  std::vector<std::string> log_;
};

}  // namespace dtgap
