#include "ega/svg.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <iomanip>
#include <limits>
#include <sstream>

namespace ega::svg {

namespace {

constexpr double kPanelW = 420.0;
constexpr double kPanelH = 300.0;
constexpr double kLeft = 62.0;
constexpr double kRight = 16.0;
constexpr double kTop = 30.0;
constexpr double kBottom = 44.0;

std::string num(double v) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2) << v;
  return os.str();
}

std::string tick(double v) {
  std::ostringstream os;
  os << std::setprecision(4) << v;
  return os.str();
}

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

struct Frame {
  double ox, oy;  // panel origin in the document
  Range xr, yr;
  bool log_x;

  double px(double x) const {
    const double lo = log_x ? std::log10(xr.lo) : xr.lo;
    const double hi = log_x ? std::log10(xr.hi) : xr.hi;
    const double v = log_x ? std::log10(x) : x;
    return ox + kLeft + (v - lo) / (hi - lo) * (kPanelW - kLeft - kRight);
  }
  double py(double y) const { return oy + kPanelH - kBottom - (y - yr.lo) / (yr.hi - yr.lo) * (kPanelH - kTop - kBottom); }
};

void axes(std::ostringstream& os, const Frame& f, const Panel& p) {
  const double x0 = f.ox + kLeft, x1 = f.ox + kPanelW - kRight;
  const double y0 = f.oy + kTop, y1 = f.oy + kPanelH - kBottom;
  os << "<rect x=\"" << num(x0) << "\" y=\"" << num(y0) << "\" width=\"" << num(x1 - x0) << "\" height=\""
     << num(y1 - y0) << "\" fill=\"none\" stroke=\"#444\"/>\n";
  os << "<text x=\"" << num((x0 + x1) / 2) << "\" y=\"" << num(f.oy + 18) << "\" text-anchor=\"middle\" font-size=\"13\">"
     << escape(p.title) << "</text>\n";
  os << "<text x=\"" << num((x0 + x1) / 2) << "\" y=\"" << num(f.oy + kPanelH - 8)
     << "\" text-anchor=\"middle\" font-size=\"11\">" << escape(p.x_label) << "</text>\n";
  os << "<text x=\"" << num(f.ox + 14) << "\" y=\"" << num((y0 + y1) / 2) << "\" text-anchor=\"middle\" font-size=\"11\" "
     << "transform=\"rotate(-90 " << num(f.ox + 14) << ' ' << num((y0 + y1) / 2) << ")\">" << escape(p.y_label)
     << "</text>\n";
  for (int i = 0; i <= 4; ++i) {
    const double yv = f.yr.lo + (f.yr.hi - f.yr.lo) * i / 4.0;
    os << "<text x=\"" << num(x0 - 4) << "\" y=\"" << num(f.py(yv) + 4) << "\" text-anchor=\"end\" font-size=\"9\">"
       << tick(yv) << "</text>\n";
    double xv;
    if (f.log_x) {
      xv = std::pow(10.0, std::log10(f.xr.lo) + (std::log10(f.xr.hi) - std::log10(f.xr.lo)) * i / 4.0);
    } else {
      xv = f.xr.lo + (f.xr.hi - f.xr.lo) * i / 4.0;
    }
    os << "<text x=\"" << num(f.px(xv)) << "\" y=\"" << num(y1 + 13) << "\" text-anchor=\"middle\" font-size=\"9\">"
       << tick(xv) << "</text>\n";
  }
}

std::string open_doc(double w, double h) {
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << num(w) << "\" height=\"" << num(h)
     << "\" viewBox=\"0 0 " << num(w) << ' ' << num(h) << "\" font-family=\"sans-serif\">\n"
     << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  return os.str();
}

Range x_range(const std::vector<Series>& series, bool log_x) {
  std::vector<double> xs;
  for (const auto& s : series)
    for (double x : s.x)
      if (!log_x || x > 0.0) xs.push_back(x);
  if (log_x && !xs.empty()) {
    const auto [lo, hi] = std::minmax_element(xs.begin(), xs.end());
    return {*lo, *hi > *lo ? *hi : *lo * 10.0};
  }
  return padded_range(xs, 0.0);
}

void draw_lines(std::ostringstream& os, const Frame& f, const std::vector<Series>& series) {
  double legend_y = f.oy + kTop + 12;
  for (const auto& s : series) {
    const std::string color = color_for(s.label);
    os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t i = 0; i < s.x.size() && i < s.y.size(); ++i) {
      if (!std::isfinite(s.y[i]) || (f.log_x && s.x[i] <= 0.0)) continue;
      os << num(f.px(s.x[i])) << ',' << num(f.py(s.y[i])) << ' ';
    }
    os << "\"/>\n";
    os << "<text x=\"" << num(f.ox + kPanelW - kRight - 6) << "\" y=\"" << num(legend_y)
       << "\" text-anchor=\"end\" font-size=\"10\" fill=\"" << color << "\">" << escape(s.label) << "</text>\n";
    legend_y += 12;
  }
}

}  // namespace

Range padded_range(const std::vector<double>& values, double margin) {
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (double v : values) {
    if (!std::isfinite(v)) continue;
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  if (!std::isfinite(lo)) return {0.0, 1.0};
  if (hi == lo) {
    const double pad = lo == 0.0 ? 1.0 : std::abs(lo) * 0.05;
    return {lo - pad, hi + pad};
  }
  const double span = hi - lo;
  return {lo - margin * span, hi + margin * span};
}

std::string color_for(const std::string& label) {
  static const std::array<std::pair<const char*, const char*>, 8> known = {{{"BASE", "#444444"},
                                                                            {"EGA-1", "#d62728"},
                                                                            {"EGA-2", "#ff7f0e"},
                                                                            {"EGA-4", "#bcbd22"},
                                                                            {"EGA-C", "#2ca02c"},
                                                                            {"EGA-M", "#1f77b4"},
                                                                            {"EGA-DB2", "#9467bd"},
                                                                            {"EGA-DB4", "#8c564b"}}};
  for (const auto& [name, color] : known) {
    if (label.rfind(name, 0) == 0 && (label.size() == std::char_traits<char>::length(name) ||
                                      label[std::char_traits<char>::length(name)] == ' ')) {
      return color;
    }
  }
  static const std::array<const char*, 6> spare = {"#17becf", "#e377c2", "#7f7f7f", "#aec7e8", "#98df8a", "#ff9896"};
  std::uint64_t h = 1469598103934665603ULL;
  for (char c : label) h = (h ^ static_cast<unsigned char>(c)) * 1099511628211ULL;
  return spare[h % spare.size()];
}

std::string line_plot(const Panel& panel, const std::vector<Series>& series, const std::vector<Marker>& markers) {
  std::vector<double> ys;
  for (const auto& s : series) ys.insert(ys.end(), s.y.begin(), s.y.end());
  Frame f{0.0, 0.0, x_range(series, panel.log_x), padded_range(ys), panel.log_x};
  std::ostringstream os;
  os << open_doc(kPanelW, kPanelH);
  axes(os, f, panel);
  for (const auto& m : markers) {
    if (m.x < f.xr.lo || m.x > f.xr.hi) continue;
    os << "<line x1=\"" << num(f.px(m.x)) << "\" x2=\"" << num(f.px(m.x)) << "\" y1=\"" << num(f.oy + kTop)
       << "\" y2=\"" << num(f.oy + kPanelH - kBottom) << "\" stroke=\"" << color_for(m.label)
       << "\" stroke-dasharray=\"4 3\"/>\n";
    os << "<text x=\"" << num(f.px(m.x) + 2) << "\" y=\"" << num(f.oy + kTop + 10) << "\" font-size=\"9\">"
       << escape(m.label) << "</text>\n";
  }
  draw_lines(os, f, series);
  os << "</svg>\n";
  return os.str();
}

namespace {

void bars(std::ostringstream& os, const Frame& f, const std::vector<std::string>& labels,
          const std::vector<double>& values) {
  const double x0 = f.ox + kLeft, x1 = f.ox + kPanelW - kRight;
  const double slot = (x1 - x0) / static_cast<double>(std::max<std::size_t>(1, values.size()));
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double top = f.py(values[i]);
    const double base = f.py(f.yr.lo);
    os << "<rect x=\"" << num(x0 + slot * (i + 0.15)) << "\" y=\"" << num(top) << "\" width=\"" << num(slot * 0.7)
       << "\" height=\"" << num(std::max(0.0, base - top)) << "\" fill=\"" << color_for(labels[i]) << "\"/>\n";
    os << "<text x=\"" << num(x0 + slot * (i + 0.5)) << "\" y=\"" << num(f.oy + kPanelH - kBottom + 24)
       << "\" text-anchor=\"middle\" font-size=\"9\">" << escape(labels[i]) << "</text>\n";
  }
}

}  // namespace

std::string bar_chart(const Panel& panel, const std::vector<std::string>& labels, const std::vector<double>& values) {
  Frame f{0.0, 0.0, {0.0, 1.0}, padded_range(values), false};
  std::ostringstream os;
  os << open_doc(kPanelW, kPanelH);
  Panel p = panel;
  axes(os, f, Panel{p.title, "", p.y_label, false});
  bars(os, f, labels, values);
  os << "</svg>\n";
  return os.str();
}

std::string heatmap(const Panel& panel, const NdArray<double>& m, const std::vector<double>& row_values) {
  const std::size_t rows = m.dim(0), cols = m.dim(1);
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (double v : m.values()) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  if (!(hi > lo)) hi = lo + 1.0;
  const double w = 520.0, h = 380.0;
  const double x0 = kLeft, y0 = kTop, pw = w - kLeft - 40.0, ph = h - kTop - kBottom;
  const double cw = pw / static_cast<double>(cols), ch = ph / static_cast<double>(rows);
  auto ramp = [](double t) {
    // dark blue -> teal -> yellow
    static const double stops[3][3] = {{68, 1, 84}, {33, 145, 140}, {253, 231, 37}};
    const double s = std::clamp(t, 0.0, 1.0) * 2.0;
    const int k = std::min(1, static_cast<int>(s));
    const double u = s - k;
    std::ostringstream c;
    c << "rgb(";
    for (int i = 0; i < 3; ++i) c << (i ? "," : "") << static_cast<int>(std::lround(stops[k][i] + u * (stops[k + 1][i] - stops[k][i])));
    c << ")";
    return c.str();
  };
  std::ostringstream os;
  os << open_doc(w, h);
  os << "<text x=\"" << num(x0 + pw / 2) << "\" y=\"18\" text-anchor=\"middle\" font-size=\"13\">" << escape(panel.title)
     << "</text>\n";
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      os << "<rect x=\"" << num(x0 + c * cw) << "\" y=\"" << num(y0 + r * ch) << "\" width=\"" << num(cw + 0.05)
         << "\" height=\"" << num(ch + 0.05) << "\" fill=\"" << ramp((m[r * cols + c] - lo) / (hi - lo)) << "\"/>\n";
    }
  }
  os << "<text x=\"" << num(x0 + pw / 2) << "\" y=\"" << num(h - 8) << "\" text-anchor=\"middle\" font-size=\"11\">"
     << escape(panel.x_label) << "</text>\n";
  os << "<text x=\"14\" y=\"" << num(y0 + ph / 2) << "\" text-anchor=\"middle\" font-size=\"11\" transform=\"rotate(-90 14 "
     << num(y0 + ph / 2) << ")\">" << escape(panel.y_label) << "</text>\n";
  for (std::size_t r = 0; r < rows && !row_values.empty(); r += std::max<std::size_t>(1, rows / 6)) {
    os << "<text x=\"" << num(x0 - 4) << "\" y=\"" << num(y0 + (r + 0.5) * ch + 3)
       << "\" text-anchor=\"end\" font-size=\"9\">" << tick(row_values[r]) << "</text>\n";
  }
  for (std::size_t c = 0; c < cols; c += std::max<std::size_t>(1, cols / 8)) {
    os << "<text x=\"" << num(x0 + (c + 0.5) * cw) << "\" y=\"" << num(y0 + ph + 13)
       << "\" text-anchor=\"middle\" font-size=\"9\">" << c << "</text>\n";
  }
  // colour bar
  for (int i = 0; i < 50; ++i) {
    os << "<rect x=\"" << num(w - 30) << "\" y=\"" << num(y0 + ph * (1.0 - (i + 1) / 50.0)) << "\" width=\"10\" height=\""
       << num(ph / 50.0 + 0.05) << "\" fill=\"" << ramp(i / 49.0) << "\"/>\n";
  }
  os << "<text x=\"" << num(w - 25) << "\" y=\"" << num(y0 - 4) << "\" text-anchor=\"middle\" font-size=\"8\">" << tick(hi)
     << "</text>\n";
  os << "<text x=\"" << num(w - 25) << "\" y=\"" << num(y0 + ph + 10) << "\" text-anchor=\"middle\" font-size=\"8\">"
     << tick(lo) << "</text>\n";
  os << "</svg>\n";
  return os.str();
}

std::string training_figure(const std::vector<Series>& val_curves, const std::vector<std::string>& labels,
                            const std::vector<double>& final_val, const std::vector<Series>& gap_curves) {
  std::ostringstream os;
  os << open_doc(3 * kPanelW, kPanelH);
  {
    std::vector<double> ys;
    for (const auto& s : val_curves) ys.insert(ys.end(), s.y.begin(), s.y.end());
    Frame f{0.0, 0.0, x_range(val_curves, false), padded_range(ys), false};
    axes(os, f, Panel{"Validation loss", "step", "val loss (nats)", false});
    draw_lines(os, f, val_curves);
  }
  {
    Frame f{kPanelW, 0.0, {0.0, 1.0}, padded_range(final_val), false};
    axes(os, f, Panel{"Final validation loss", "", "val loss (nats)", false});
    bars(os, f, labels, final_val);
  }
  {
    std::vector<double> ys;
    for (const auto& s : gap_curves) ys.insert(ys.end(), s.y.begin(), s.y.end());
    Frame f{2 * kPanelW, 0.0, x_range(gap_curves, false), padded_range(ys), false};
    axes(os, f, Panel{"Generalisation gap", "step", "val - train (nats)", false});
    draw_lines(os, f, gap_curves);
  }
  os << "</svg>\n";
  return os.str();
}

}  // namespace ega::svg
