#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "selflabel/orchestrator.hpp"

namespace selflabel {

inline constexpr int kReportSchemaVersion = 1;

/// Class names in the order of the metrics log's count columns.
std::vector<std::string> metrics_class_names(const std::filesystem::path& csv_path);

/// Similarity curve: one row per cycle.
std::string curves_csv(const std::vector<CycleMetrics>& rows);
/// Accumulated pseudo-label count per class and cycle.
std::string counts_csv(const std::vector<CycleMetrics>& rows, const std::vector<std::string>& class_names);
/// Line charts of the similarity and the per-class counts against the cycle.
std::string curves_svg(const std::vector<CycleMetrics>& rows, const std::vector<std::string>& class_names);

struct ReportFiles {
  std::filesystem::path curves_csv;
  std::filesystem::path counts_csv;
  std::filesystem::path curves_svg;
  std::optional<std::filesystem::path> label_stats_csv;  // only with ablations in final_report.json
};

/// Regenerates the report files of a run directory into `out_dir`.
ReportFiles write_report(const std::filesystem::path& run_dir, const std::filesystem::path& out_dir);

}  // namespace selflabel
