#include "dtgap/reports.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "dtgap/error.hpp"

namespace dtgap {

namespace {

std::string fmt_double(double v) {
  std::ostringstream out;
  out.precision(17);
  out << v;
  return out.str();
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

}  // namespace

std::string RunStamp::comment_block() const {
  std::ostringstream out;
  out << "# master_seed=" << master_seed << "\n";
  for (const auto& [name, digest] : digests) out << "# digest." << name << "=" << digest << "\n";
  return out.str();
}

std::string report_csv(std::span<const LoIReportRow> rows, const RunStamp& stamp) {
  std::ostringstream out;
  out << stamp.comment_block();
  out << "loi,epochs,split_seed,mse_m2,train_s,finetune_s,novel_count\n";
  for (const auto& r : rows) {
    out << to_string(r.loi) << ',' << r.epochs << ',' << r.split_seed << ',' << fmt_double(r.mse) << ','
        << fmt_double(r.train_s) << ',' << fmt_double(r.finetune_s) << ',' << r.novel_count << '\n';
  }
  return out.str();
}

std::vector<LoIReportRow> parse_report_csv(const std::string& text) {
  std::vector<LoIReportRow> rows;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  bool header = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    if (!header) {
      if (line != "loi,epochs,split_seed,mse_m2,train_s,finetune_s,novel_count")
        throw SchemaError("report: unexpected header", lineno);
      header = true;
      continue;
    }
    const auto cells = split_csv(line);
    if (cells.size() != 7) throw SchemaError("report: expected 7 columns on line " + std::to_string(lineno), lineno);
    try {
      LoIReportRow r;
      r.loi = loi_from_string(cells[0]);
      r.epochs = std::stoi(cells[1]);
      r.split_seed = std::stoull(cells[2]);
      r.mse = std::stod(cells[3]);
      r.train_s = std::stod(cells[4]);
      r.finetune_s = std::stod(cells[5]);
      r.novel_count = std::stoull(cells[6]);
      rows.push_back(r);
    } catch (const std::logic_error&) {
      throw SchemaError("report: bad value on line " + std::to_string(lineno), lineno);
    } catch (const ArgumentError& e) {
      throw SchemaError(std::string("report: ") + e.what() + " on line " + std::to_string(lineno), lineno);
    }
  }
  if (!header) throw SchemaError("report: missing header");
  return rows;
}

std::string summary_table(std::span<const CellSummary> cells) {
  std::vector<int> epochs;
  std::vector<LoI> lois;
  for (const auto& c : cells) {
    if (std::find(epochs.begin(), epochs.end(), c.epochs) == epochs.end()) epochs.push_back(c.epochs);
    if (std::find(lois.begin(), lois.end(), c.loi) == lois.end()) lois.push_back(c.loi);
  }
  std::sort(epochs.begin(), epochs.end());
  std::ostringstream out;
  out << std::left << std::setw(8) << "LoI";
  for (int e : epochs) out << std::setw(26) << (std::to_string(e) + (e == 1 ? " epoch" : " epochs"));
  out << "\n";
  for (LoI l : lois) {
    out << std::setw(8) << ("LoI " + to_string(l));
    for (int e : epochs) {
      const auto it = std::find_if(cells.begin(), cells.end(),
                                   [&](const CellSummary& c) { return c.loi == l && c.epochs == e; });
      if (it == cells.end()) {
        out << std::setw(26) << "-";
        continue;
      }
      char buf[64];
      std::snprintf(buf, sizeof buf, "(%.4g, %.4g)", it->mean_mse, it->mean_train_s);
      out << std::setw(26) << buf;
    }
    out << "\n";
  }
  return out.str();
}

std::string secondgen_csv(std::span<const SecondGenerationResult> rows, const RunStamp& stamp) {
  std::size_t wins = 0;
  for (const auto& r : rows) wins += r.augmented_wins() ? 1 : 0;
  const double rate = rows.empty() ? 0.0 : static_cast<double>(wins) / static_cast<double>(rows.size());
  std::ostringstream out;
  out << stamp.comment_block();
  out << "fresh_seed,original_records,augmented_records,mse_original_m2,mse_augmented_m2,augmented_wins,win_rate\n";
  for (const auto& r : rows) {
    out << r.fresh_seed << ',' << r.original_records << ',' << r.augmented_records << ','
        << fmt_double(r.mse_original) << ',' << fmt_double(r.mse_augmented) << ',' << (r.augmented_wins() ? 1 : 0)
        << ',' << fmt_double(rate) << '\n';
  }
  return out.str();
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ArgumentError("cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string file_digest(const std::filesystem::path& path) { return hex64(fnv1a(read_file(path))); }

void write_file_atomic(const std::filesystem::path& path, const std::string& contents) {
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ArgumentError("cannot write " + tmp);
    out << contents;
    out.flush();
    if (!out) throw Error("write failed on " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace dtgap
