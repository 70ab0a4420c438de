// Minimal native SVG emission for line charts and heatmaps. Charts are
// derived, optional artifacts; the CSVs remain the contract.
#pragma once

#include <string>
#include <vector>

namespace mergelab {

struct ChartSeries {
  std::string label;
  std::vector<double> xs;
  std::vector<double> ys;
};

struct ChartOptions {
  std::string title, x_label, y_label;
  bool log_x = false;
  int width = 720, height = 480;
};

std::string line_chart_svg(const std::vector<ChartSeries>& series, const ChartOptions& opt);

struct HeatmapAnchor {
  std::string label;
  double x = 0, y = 0;
};

// values are row-major over (ys, xs).
std::string heatmap_svg(const std::vector<double>& xs, const std::vector<double>& ys,
                        const std::vector<double>& values, const ChartOptions& opt,
                        const std::vector<HeatmapAnchor>& anchors = {});

}  // namespace mergelab
