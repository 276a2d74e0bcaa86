#include "dtgap/repository.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <fstream>
#include <istream>
#include <mutex>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include <json.hpp>

#include "dtgap/error.hpp"

namespace dtgap {

using nlohmann::json;

std::string to_string(Provenance p) {
  return p == Provenance::DesignSim ? "design-sim" : "deployment-detached";
}

Provenance provenance_from_string(const std::string& s) {
  if (s == "design-sim") return Provenance::DesignSim;
  if (s == "deployment-detached") return Provenance::DeploymentDetached;
  throw SchemaError("unknown provenance '" + s + "'");
}

// ---------------------------------------------------------------------------
// Records

std::string RepositoryRecord::to_json_line() const {
  json j;
  j["config"] = {{"health", config.health},
                 {"load_n", config.load_magnitude},
                 {"load_pos", config.load_position},
                 {"temp_c", config.temperature}};
  j["sensors"] = sensors.values;
  j["prov"] = to_string(provenance);
  j["tags"] = tags;
  j["ts"] = timestamp;
  j["seed"] = seed;
  return j.dump();
}

RepositoryRecord RepositoryRecord::from_json_line(const std::string& line, std::size_t lineno) {
  const auto fail = [lineno](const std::string& why) {
    return SchemaError("malformed record at line " + std::to_string(lineno) + ": " + why, lineno);
  };
  RepositoryRecord r;
  try {
    const json j = json::parse(line);
    const auto& c = j.at("config");
    const auto health = c.at("health").get<std::vector<double>>();
    if (health.size() != kGroupCount) throw fail("health needs 5 entries");
    std::copy(health.begin(), health.end(), r.config.health.begin());
    r.config.load_magnitude = c.at("load_n").get<double>();
    r.config.load_position = c.at("load_pos").get<int>();
    r.config.temperature = c.at("temp_c").get<double>();
    const auto sensors = j.at("sensors").get<std::vector<double>>();
    if (sensors.size() != kSensorCount) throw fail("sensors needs 42 entries");
    std::copy(sensors.begin(), sensors.end(), r.sensors.values.begin());
    r.provenance = provenance_from_string(j.at("prov").get<std::string>());
    r.sensors.domain = r.provenance == Provenance::DesignSim ? Domain::Virtual : Domain::Detached;
    r.tags = j.at("tags").get<std::vector<std::string>>();
    r.timestamp = j.at("ts").get<std::string>();
    r.seed = j.at("seed").get<Seed>();
  } catch (const SchemaError& e) {
    if (e.line() == lineno) throw;
    throw fail(e.what());
  } catch (const json::exception& e) {
    throw fail(e.what());
  }
  return r;
}

namespace {

void validate_record(const RepositoryRecord& r, std::size_t index) {
  const auto fail = [index](const std::string& why) {
    return ArgumentError("record " + std::to_string(index) + ": " + why);
  };
  for (double v : r.sensors.values)
    if (!std::isfinite(v)) throw fail("non-finite sensor value");
  for (double h : r.config.health)
    if (!(h > 0.0 && h <= 1.0)) throw fail("health outside (0, 1]");
  if (!(r.config.load_magnitude >= 0.0) || !std::isfinite(r.config.load_magnitude))
    throw fail("invalid load magnitude");
  if (r.config.load_position < 0) throw fail("negative load position");
  if (!std::isfinite(r.config.temperature)) throw fail("non-finite temperature");
}

// Identity used for deduplication: everything except the timestamp.
std::string dedup_key(RepositoryRecord r) {
  r.timestamp.clear();
  return r.to_json_line();
}

}  // namespace

// ---------------------------------------------------------------------------
// Manifest

void RepositoryManifest::add(const SensorVector& s) {
  ++count;
  const double n = static_cast<double>(count);
  for (std::size_t j = 0; j < kSensorCount; ++j) {
    auto& st = sensors[j];
    const double x = s.values[j];
    const double delta = x - st.mean;
    st.mean += delta / n;
    st.m2 += delta * (x - st.mean);
    st.std = count >= 2 ? std::sqrt(st.m2 / (n - 1.0)) : 0.0;
  }
}

RepositoryManifest RepositoryManifest::recompute(std::span<const RepositoryRecord> records) {
  RepositoryManifest m;
  m.count = records.size();
  m.watermark = records.size();
  if (records.empty()) return m;
  const double n = static_cast<double>(records.size());
  for (std::size_t j = 0; j < kSensorCount; ++j) {
    double sum = 0.0;
    for (const auto& r : records) sum += r.sensors.values[j];
    const double mean = sum / n;
    double m2 = 0.0;
    for (const auto& r : records) {
      const double d = r.sensors.values[j] - mean;
      m2 += d * d;
    }
    m.sensors[j] = {mean, records.size() >= 2 ? std::sqrt(m2 / (n - 1.0)) : 0.0, m2};
  }
  return m;
}

std::string RepositoryManifest::to_json() const {
  json j;
  j["schema_version"] = schema_version;
  j["count"] = count;
  j["watermark"] = watermark;
  auto& arr = j["sensors"] = json::array();
  for (const auto& s : sensors) arr.push_back({{"mean", s.mean}, {"std", s.std}, {"m2", s.m2}, {"n", count}});
  return j.dump(1);
}

RepositoryManifest RepositoryManifest::from_json(const std::string& text) {
  RepositoryManifest m;
  try {
    const json j = json::parse(text);
    m.schema_version = j.at("schema_version").get<int>();
    if (m.schema_version != kSchemaVersion)
      throw SchemaError("manifest schema version " + std::to_string(m.schema_version) + " != supported " +
                        std::to_string(kSchemaVersion));
    m.count = j.at("count").get<std::size_t>();
    m.watermark = j.at("watermark").get<std::size_t>();
    const auto& arr = j.at("sensors");
    if (!arr.is_array() || arr.size() != kSensorCount) throw SchemaError("manifest: expected 42 sensor summaries");
    for (std::size_t s = 0; s < kSensorCount; ++s) {
      m.sensors[s] = {arr[s].at("mean").get<double>(), arr[s].at("std").get<double>(), arr[s].at("m2").get<double>()};
      if (arr[s].at("n").get<std::size_t>() != m.count) throw SchemaError("manifest: per-sensor n != count");
    }
  } catch (const json::exception& e) {
    throw SchemaError(std::string("manifest: ") + e.what());
  }
  return m;
}

// ---------------------------------------------------------------------------
// Clock

std::string logical_timestamp(std::size_t insertion_index) {
  constexpr std::time_t kBase = 1704067200;  // 2024-01-01T00:00:00Z
  const std::time_t t = kBase + static_cast<std::time_t>(insertion_index);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string system_clock_source(std::size_t) {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// ---------------------------------------------------------------------------
// Novelty

NoveltyResult is_novel(const SensorVector& reading, const RepositoryManifest& manifest) {
  if (manifest.count < 2) throw InsufficientData("insufficient repository statistics: need n >= 2");
  NoveltyResult r;
  for (std::size_t j = 0; j < kSensorCount; ++j) {
    const auto& s = manifest.sensors[j];
    if (std::abs(reading.values[j] - s.mean) > kZ975 * s.std) r.offending.push_back(j);
  }
  r.novel = !r.offending.empty();
  return r;
}

// ---------------------------------------------------------------------------
// Repository

Repository::Repository() : mutex_(std::make_unique<std::shared_mutex>()), clock_(logical_timestamp) {}
Repository::Repository(Repository&&) noexcept = default;
Repository& Repository::operator=(Repository&&) noexcept = default;
Repository::~Repository() = default;

Repository Repository::in_memory() { return Repository(); }

Repository Repository::open(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  Repository repo;
  fs::create_directories(dir);
  repo.dir_ = dir;
  const fs::path records = dir / "records.jsonl";
  const fs::path manifest = dir / "manifest.json";
  if (fs::exists(records)) {
    std::ifstream in(records);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty()) continue;
      auto rec = RepositoryRecord::from_json_line(line, lineno);
      validate_record(rec, lineno);
      repo.records_.push_back(std::move(rec));
    }
  }
  bool manifest_ok = false;
  if (fs::exists(manifest)) {
    std::ifstream in(manifest);
    std::stringstream ss;
    ss << in.rdbuf();
    repo.manifest_ = RepositoryManifest::from_json(ss.str());
    manifest_ok = repo.manifest_.count == repo.records_.size();
  }
  if (!manifest_ok) {
    // Missing, or a crash landed between the record append and the
    // manifest swap: rebuild from the record file.
    repo.manifest_ = RepositoryManifest::recompute(repo.records_);
    repo.persist_manifest_locked();
  }
  return repo;
}

void Repository::set_clock(ClockSource clock) {
  std::unique_lock lock(*mutex_);
  clock_ = std::move(clock);
}

void Repository::append_locked(std::span<const RepositoryRecord> records, bool dedup) {
  for (std::size_t i = 0; i < records.size(); ++i) validate_record(records[i], i);
  std::unordered_set<std::string> seen;
  if (dedup)
    for (const auto& r : records_) seen.insert(dedup_key(r));

  std::vector<RepositoryRecord> fresh;
  fresh.reserve(records.size());
  for (const auto& r : records) {
    if (dedup && !seen.insert(dedup_key(r)).second) continue;
    RepositoryRecord copy = r;
    if (copy.timestamp.empty()) copy.timestamp = clock_(records_.size() + fresh.size());
    copy.sensors.domain = copy.provenance == Provenance::DesignSim ? Domain::Virtual : Domain::Detached;
    fresh.push_back(std::move(copy));
  }
  if (fresh.empty()) return;

  if (dir_) {
    std::ofstream out(*dir_ / "records.jsonl", std::ios::app);
    if (!out) throw Error("cannot append to " + (*dir_ / "records.jsonl").string());
    for (const auto& r : fresh) out << r.to_json_line() << '\n';
    out.flush();
    if (!out) throw Error("write failed on " + (*dir_ / "records.jsonl").string());
  }
  for (auto& r : fresh) {
    manifest_.add(r.sensors);
    records_.push_back(std::move(r));
  }
}

void Repository::persist_manifest_locked() const {
  if (!dir_) return;
  const auto tmp = *dir_ / "manifest.json.tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw Error("cannot write " + tmp.string());
    out << manifest_.to_json() << '\n';
    out.flush();
    if (!out) throw Error("write failed on " + tmp.string());
  }
  std::filesystem::rename(tmp, *dir_ / "manifest.json");
}

RepositoryManifest Repository::ingest(std::span<const RepositoryRecord> records, bool dedup) {
  std::unique_lock lock(*mutex_);
  if (records.empty()) return manifest_;
  append_locked(records, dedup);
  persist_manifest_locked();
  return manifest_;
}

RepositoryManifest Repository::ingest_jsonl(std::istream& in, bool dedup) {
  std::vector<RepositoryRecord> parsed;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    parsed.push_back(RepositoryRecord::from_json_line(line, lineno));
  }
  return ingest(parsed, dedup);
}

std::vector<RepositoryRecord> Repository::query(const RecordFilter& filter) const {
  for (const auto& r : filter.ranges) {
    if (r.field >= kConfigDim || !(r.lo <= r.hi)) throw ArgumentError("invalid range filter");
  }
  std::shared_lock lock(*mutex_);
  std::vector<std::size_t> hits;
  for (std::size_t i = 0; i < records_.size(); ++i) {
    const auto& rec = records_[i];
    if (filter.provenance && rec.provenance != *filter.provenance) continue;
    const bool tags_ok = std::all_of(filter.tags.begin(), filter.tags.end(), [&](const std::string& t) {
      return std::find(rec.tags.begin(), rec.tags.end(), t) != rec.tags.end();
    });
    if (!tags_ok) continue;
    const auto values = rec.config.to_array();
    const bool ranges_ok = std::all_of(filter.ranges.begin(), filter.ranges.end(), [&](const ConfigRange& r) {
      return values[r.field] >= r.lo && values[r.field] <= r.hi;
    });
    if (ranges_ok) hits.push_back(i);
  }
  std::stable_sort(hits.begin(), hits.end(),
                   [&](std::size_t a, std::size_t b) { return records_[a].timestamp < records_[b].timestamp; });
  std::vector<RepositoryRecord> out;
  out.reserve(hits.size());
  for (std::size_t i : hits) out.push_back(records_[i]);
  return out;
}

RepositoryManifest Repository::augment(RepositoryRecord detached, bool force) {
  std::unique_lock lock(*mutex_);
  const NoveltyResult verdict = is_novel(detached.sensors, manifest_);
  if (!verdict.novel && !force) throw ArgumentError("augment: record is not novel against the repository");
  detached.provenance = Provenance::DeploymentDetached;
  if (std::find(detached.tags.begin(), detached.tags.end(), kTagNovelCritical) == detached.tags.end())
    detached.tags.emplace_back(kTagNovelCritical);
  if (!verdict.novel) {
    detached.tags.emplace_back(kTagForced);
    log_.push_back("augment: forced insertion of a non-novel record at index " + std::to_string(records_.size()));
  }
  append_locked(std::span<const RepositoryRecord>(&detached, 1), false);
  manifest_ = RepositoryManifest::recompute(records_);
  persist_manifest_locked();
  return manifest_;
}

RepositoryManifest Repository::manifest() const {
  std::shared_lock lock(*mutex_);
  return manifest_;
}

std::size_t Repository::size() const {
  std::shared_lock lock(*mutex_);
  return records_.size();
}

bool Repository::has_design_data() const {
  std::shared_lock lock(*mutex_);
  return std::any_of(records_.begin(), records_.end(),
                     [](const RepositoryRecord& r) { return r.provenance == Provenance::DesignSim; });
}

std::vector<RepositoryRecord> Repository::records() const {
  std::shared_lock lock(*mutex_);
  return records_;
}

Repository Repository::snapshot() const {
  std::shared_lock lock(*mutex_);
  Repository copy;
  copy.records_ = records_;
  copy.manifest_ = manifest_;
  copy.clock_ = clock_;
  return copy;
}

std::vector<std::string> Repository::log() const {
  std::shared_lock lock(*mutex_);
  return log_;
}

}  // namespace dtgap
