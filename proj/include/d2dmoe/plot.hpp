#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

namespace d2dmoe {

struct Series {
  std::string label;
  std::vector<std::pair<double, double>> points;  // drawn in x order
};

struct ChartOptions {
  std::string title;
  std::string x_label;
  std::string y_label;
  int width = 720;
  int height = 480;
};

// Standalone SVG line chart with axes, ticks and a legend.
std::string line_chart_svg(const std::vector<Series>& series, const ChartOptions& opts);

// Minimal CSV table: header names and rows of cells (no quoting).
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t column(const std::string& name) const;  // ValidationError when absent
};
CsvTable parse_csv(const std::string& text);

// One series per distinct combination of the group columns, x/y taken from
// the named columns. Rows with an empty x or y cell are skipped.
std::vector<Series> series_from_csv(const CsvTable& table, const std::string& x, const std::string& y,
                                    const std::vector<std::string>& group_by);

}  // namespace d2dmoe
