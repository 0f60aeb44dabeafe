#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace ikdmil {

// One polyline on a plot. yerr entries, when present, draw symmetric error
// bars; pass an empty vector for none.
struct PlotSeries {
  std::string label;
  std::vector<double> x;
  std::vector<double> y;
  std::vector<double> yerr;
};

struct PlotSpec {
  std::string title;
  std::string xlabel;
  std::string ylabel;
  int width = 860;
  int height = 520;
};

// Renders a static SVG line chart with axes, ticks, legend, and optional
// error bars. Output is deterministic for identical inputs.
void write_svg_line_plot(const std::filesystem::path& path, const PlotSpec& spec,
                         const std::vector<PlotSeries>& series);

}  // namespace ikdmil
