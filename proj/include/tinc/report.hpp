#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

namespace tinc::report {

struct RunMetrics {
  std::string source;
  std::string method;
  std::string seed;
  double scan_auroc = 0.0;
  double scan_prauc = 0.0;
  double volume_auroc = 0.0;
  double volume_prauc = 0.0;
  double dv_spearman = 0.0;
};

/// Reads a metrics.json. Errors name the offending file.
RunMetrics read_metrics(const std::filesystem::path& file);

/// Expands shell-style patterns (and directories, searched for metrics.json).
/// Throws ValidationError when nothing matches.
std::vector<std::filesystem::path> expand_inputs(const std::vector<std::string>& patterns);

struct MethodRow {
  std::string method;
  std::vector<RunMetrics> runs;  // sorted by seed
  RunMetrics mean;               // seed = "mean"
};

std::vector<MethodRow> aggregate(const std::vector<RunMetrics>& runs);

inline constexpr const char* kCsvHeader = "method,seed,scan_auroc,scan_prauc,volume_auroc,volume_prauc,dv_spearman";

/// Per-seed rows followed by one "mean" row per method.
std::string to_csv(const std::vector<MethodRow>& rows);
std::vector<RunMetrics> parse_csv(const std::string& text);

std::string text_table(const std::vector<MethodRow>& rows);

struct Series {
  std::string label;
  std::vector<double> y;
};

/// Minimal line chart.
std::string svg_lines(const std::string& title, const std::string& y_label, const std::vector<Series>& series);

}  // namespace tinc::report
