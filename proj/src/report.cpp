#include "selflabel/report.hpp"

#include <algorithm>
#include <cstdio>
#include <sstream>

#include "selflabel/kitti_io.hpp"

namespace selflabel {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string fmt(const char* pattern, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, pattern, v);
  return buf;
}

std::string schema_line() { return "#schema=" + std::to_string(kReportSchemaVersion) + "\n"; }

const char* const kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};

struct Series {
  std::string label;
  std::vector<double> values;
};

/// One chart panel at vertical offset `top`.
std::string panel(const std::string& title, const std::vector<int>& cycles, const std::vector<Series>& series,
                  double top) {
  constexpr double left = 60, width = 520, height = 200;
  double y_max = 0.0;
  for (const auto& s : series) {
    for (double v : s.values) y_max = std::max(y_max, v);
  }
  if (y_max <= 0.0) y_max = 1.0;
  const int x_min = cycles.empty() ? 0 : cycles.front();
  const int x_max = cycles.empty() ? 1 : std::max(cycles.back(), x_min + 1);
  auto px = [&](int c) { return left + width * (c - x_min) / static_cast<double>(x_max - x_min); };
  auto py = [&](double v) { return top + height - height * v / y_max; };

  std::string svg;
  svg += "<text x=\"" + fmt("%.1f", left) + "\" y=\"" + fmt("%.1f", top - 8) + "\" font-size=\"13\">" + title +
         "</text>\n";
  svg += "<rect x=\"" + fmt("%.1f", left) + "\" y=\"" + fmt("%.1f", top) + "\" width=\"" + fmt("%.1f", width) +
         "\" height=\"" + fmt("%.1f", height) + "\" fill=\"none\" stroke=\"#444\"/>\n";
  svg += "<text x=\"" + fmt("%.1f", left - 6) + "\" y=\"" + fmt("%.1f", top + 4) +
         "\" font-size=\"10\" text-anchor=\"end\">" + fmt("%.1f", y_max) + "</text>\n";
  svg += "<text x=\"" + fmt("%.1f", left - 6) + "\" y=\"" + fmt("%.1f", top + height) +
         "\" font-size=\"10\" text-anchor=\"end\">0</text>\n";
  svg += "<text x=\"" + fmt("%.1f", left) + "\" y=\"" + fmt("%.1f", top + height + 14) + "\" font-size=\"10\">" +
         std::to_string(x_min) + "</text>\n";
  svg += "<text x=\"" + fmt("%.1f", left + width) + "\" y=\"" + fmt("%.1f", top + height + 14) +
         "\" font-size=\"10\" text-anchor=\"end\">cycle " + std::to_string(x_max) + "</text>\n";
  for (std::size_t s = 0; s < series.size(); ++s) {
    const char* color = kPalette[s % std::size(kPalette)];
    std::string points;
    for (std::size_t i = 0; i < cycles.size() && i < series[s].values.size(); ++i) {
      if (!points.empty()) points += ' ';
      points += fmt("%.2f", px(cycles[i])) + "," + fmt("%.2f", py(series[s].values[i]));
    }
    svg += "<polyline fill=\"none\" stroke=\"" + std::string(color) + "\" stroke-width=\"1.5\" points=\"" + points +
           "\"/>\n";
    svg += "<text x=\"" + fmt("%.1f", left + width + 8) + "\" y=\"" + fmt("%.1f", top + 14 + 14.0 * s) +
           "\" font-size=\"11\" fill=\"" + color + "\">" + series[s].label + "</text>\n";
  }
  return svg;
}

}  // namespace

std::vector<std::string> metrics_class_names(const fs::path& csv_path) {
  std::istringstream in(kitti::read_text_file(csv_path));
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    if (line.rfind(kMetricsHeaderPrefix, 0) != 0) throw ParseError("unexpected metrics header in " + csv_path.string());
    std::vector<std::string> names;
    std::stringstream ss(line.substr(kMetricsHeaderPrefix.size()));
    std::string cell;
    while (std::getline(ss, cell, ',')) {
      if (cell.rfind("count_", 0) == 0) names.push_back(cell.substr(6));
    }
    return names;
  }
  throw ParseError("metrics file " + csv_path.string() + " has no header");
}

std::string curves_csv(const std::vector<CycleMetrics>& rows) {
  std::string out = schema_line() + "cycle,similarity,delta,accumulated_images,predicted_images\n";
  for (const auto& r : rows) {
    out += std::to_string(r.cycle) + "," + fmt("%.6f", r.similarity) + "," + (r.delta ? fmt("%.6f", *r.delta) : "") +
           "," + std::to_string(r.accumulated_images) + "," + std::to_string(r.predicted_images) + "\n";
  }
  return out;
}

std::string counts_csv(const std::vector<CycleMetrics>& rows, const std::vector<std::string>& class_names) {
  std::string out = schema_line() + "cycle";
  for (const auto& n : class_names) out += "," + n;
  out += "\n";
  for (const auto& r : rows) {
    out += std::to_string(r.cycle);
    for (std::size_t c = 0; c < class_names.size(); ++c) {
      out += "," + std::to_string(c < r.class_counts.size() ? r.class_counts[c] : 0);
    }
    out += "\n";
  }
  return out;
}

std::string curves_svg(const std::vector<CycleMetrics>& rows, const std::vector<std::string>& class_names) {
  std::vector<int> cycles;
  Series similarity{"similarity (mAP)", {}};
  std::vector<Series> counts;
  for (const auto& n : class_names) counts.push_back({n, {}});
  for (const auto& r : rows) {
    cycles.push_back(r.cycle);
    similarity.values.push_back(r.similarity);
    for (std::size_t c = 0; c < counts.size(); ++c) {
      counts[c].values.push_back(c < r.class_counts.size() ? static_cast<double>(r.class_counts[c]) : 0.0);
    }
  }
  std::string svg =
      "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"720\" height=\"560\" font-family=\"sans-serif\">\n"
      "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  svg += panel("Similarity of consecutive prediction passes", cycles, {similarity}, 30);
  svg += panel("Accumulated pseudo-labels per class", cycles, counts, 300);
  return svg + "</svg>\n";
}

ReportFiles write_report(const fs::path& run_dir, const fs::path& out_dir) {
  const fs::path metrics = run_dir / "metrics.csv";
  if (!fs::exists(metrics)) throw ConfigError("'" + run_dir.string() + "' has no metrics.csv");
  const auto rows = read_metrics(metrics);
  const auto names = metrics_class_names(metrics);
  fs::create_directories(out_dir);

  ReportFiles files{out_dir / "curves.csv", out_dir / "counts.csv", out_dir / "curves.svg", std::nullopt};
  kitti::write_text_file(files.curves_csv, curves_csv(rows));
  kitti::write_text_file(files.counts_csv, counts_csv(rows, names));
  kitti::write_text_file(files.curves_svg, curves_svg(rows, names));

  const fs::path final_report = run_dir / "final_report.json";
  if (fs::exists(final_report)) {
    const json report = json::parse(kitti::read_text_file(final_report));
    if (report.contains("ablations")) {
      std::string csv = schema_line() + "class,count,true_positives,false_positives,fp_percent\n";
      for (const auto& s : report["ablations"]["self_label_stats"]) {
        csv += s["class"].get<std::string>() + "," + std::to_string(s["count"].get<std::size_t>()) + "," +
               std::to_string(s["true_positives"].get<std::size_t>()) + "," +
               std::to_string(s["false_positives"].get<std::size_t>()) + "," +
               fmt("%.2f", s["fp_percent"].get<double>()) + "\n";
      }
      files.label_stats_csv = out_dir / "label_stats.csv";
      kitti::write_text_file(*files.label_stats_csv, csv);
    }
  }
  return files;
}

}  // namespace selflabel
