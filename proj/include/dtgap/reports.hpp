#pragma once

#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "dtgap/orchestrator.hpp"

namespace dtgap {

// Provenance stamped into every output file as leading `# key=value`
// comment lines.
struct RunStamp {
  Seed master_seed = 0;
  std::map<std::string, std::string> digests;  // input name -> hex digest

  std::string comment_block() const;
};

// Columns: loi,epochs,split_seed,mse_m2,train_s,finetune_s,novel_count
std::string report_csv(std::span<const LoIReportRow> rows, const RunStamp& stamp);
std::vector<LoIReportRow> parse_report_csv(const std::string& text);

// Table of per-(LoI, epochs) means laid out as rows = LoI, columns =
// epoch budgets, cells = (mse, seconds).
std::string summary_table(std::span<const CellSummary> cells);

// Columns: fresh_seed,original_records,augmented_records,mse_original_m2,
// mse_augmented_m2,augmented_wins,win_rate
std::string secondgen_csv(std::span<const SecondGenerationResult> rows, const RunStamp& stamp);

std::string read_file(const std::filesystem::path& path);
std::string file_digest(const std::filesystem::path& path);
// Writes via a temporary file and rename.
void write_file_atomic(const std::filesystem::path& path, const std::string& contents);

}  // namespace dtgap
