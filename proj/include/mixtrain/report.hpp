#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

namespace mixtrain {

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  /// Index of `name` in the header; throws std::runtime_error if absent.
  std::size_t column(const std::string& name) const;
};

CsvTable read_csv(const std::filesystem::path& file);

struct Series {
  std::string label;
  std::vector<std::pair<double, double>> points;
};

/// Standalone SVG line plot with axis ticks and a legend.
std::string render_svg_plot(const std::string& title, const std::string& x_label,
                            const std::string& y_label, const std::vector<Series>& series);

/// Averages consecutive points into at most `max_points` bins.
Series downsample(const Series& s, std::size_t max_points);

struct ReportFiles {
  std::filesystem::path map_svg, pseudo_svg, easy_svg, merged_csv;
};

/// Reads `<run>/stats.csv` of every run and writes map.svg, n_pseudo.svg,
/// easy_ratio.svg and merged.csv into `out_dir`.
ReportFiles write_report(const std::vector<std::filesystem::path>& runs,
                         const std::filesystem::path& out_dir);

}  // namespace mixtrain
