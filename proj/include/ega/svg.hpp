#pragma once

#include "ega/tensor.hpp"

#include <string>
#include <vector>

namespace ega::svg {

struct Range {
  double lo = 0.0;
  double hi = 1.0;
};

/// [min, max] of the finite values widened by `margin` of the span on each side.
Range padded_range(const std::vector<double>& values, double margin = 0.05);

/// Fixed palette keyed by series label, so a variant keeps its colour across figures.
std::string color_for(const std::string& label);

struct Series {
  std::string label;
  std::vector<double> x;
  std::vector<double> y;
};

struct Marker {
  double x = 0.0;
  std::string label;
};

struct Panel {
  std::string title;
  std::string x_label;
  std::string y_label;
  bool log_x = false;
};

/// Self-contained SVG documents (no timestamps, deterministic number formatting).
std::string line_plot(const Panel& panel, const std::vector<Series>& series, const std::vector<Marker>& markers = {});
std::string bar_chart(const Panel& panel, const std::vector<std::string>& labels, const std::vector<double>& values);
/// rows = y axis (row 0 at the top), columns = x axis; viridis-like ramp over [min, max].
std::string heatmap(const Panel& panel, const NdArray<double>& matrix, const std::vector<double>& row_values);

/// Three side-by-side panels: validation curves, final validation loss bars, gap traces.
std::string training_figure(const std::vector<Series>& val_curves, const std::vector<std::string>& labels,
                            const std::vector<double>& final_val, const std::vector<Series>& gap_curves);

}  // namespace ega::svg
