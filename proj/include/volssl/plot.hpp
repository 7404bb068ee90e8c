#pragma once

// Minimal SVG charts. Every chart is written next to a CSV holding exactly the
// plotted numbers.

#include <filesystem>
#include <string>
#include <vector>

namespace volssl::plot {

struct BarSeries {
  std::string name;
  std::vector<double> values;            // one per category
  std::vector<std::string> annotations;  // optional text above each bar
};

std::string bar_chart_svg(const std::string& title, const std::vector<std::string>& categories, const std::vector<BarSeries>& series,
                          const std::string& y_label);
std::string bar_chart_csv(const std::vector<std::string>& categories, const std::vector<BarSeries>& series);

struct LineSeries {
  std::string name;
  std::vector<double> x;
  std::vector<double> y;
};

std::string line_chart_svg(const std::string& title, const std::vector<LineSeries>& series, const std::string& x_label,
                           const std::string& y_label);
std::string line_chart_csv(const std::vector<LineSeries>& series);

/// values[r][c]; colour scale clamps to [lo, hi].
std::string heatmap_svg(const std::string& title, const std::vector<std::string>& rows, const std::vector<std::string>& cols,
                        const std::vector<std::vector<double>>& values, double lo = 0.0, double hi = 1.0);
std::string heatmap_csv(const std::vector<std::string>& rows, const std::vector<std::string>& cols,
                        const std::vector<std::vector<double>>& values);

/// Writes <stem>.svg and <stem>.csv.
void write_figure(const std::filesystem::path& stem, const std::string& svg, const std::string& csv);

}  // namespace volssl::plot
