#include "mergelab/svg.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace mergelab {

namespace {

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
                          "#17becf", "#7f7f7f"};

struct Frame {
  double x0, y0, x1, y1;  // data range
  int px0, py0, px1, py1; // pixel box (py0 = top)
  bool log_x;

  double fx(double x) const {
    const double lo = log_x ? std::log10(x0) : x0;
    const double hi = log_x ? std::log10(x1) : x1;
    const double v = log_x ? std::log10(x) : x;
    const double t = hi > lo ? (v - lo) / (hi - lo) : 0.5;
    return px0 + t * (px1 - px0);
  }
  double fy(double y) const {
    const double t = y1 > y0 ? (y - y0) / (y1 - y0) : 0.5;
    return py1 - t * (py1 - py0);
  }
};

std::string esc(const std::string& s) {
  std::string out;
  for (char c : s) {
    if (c == '<') out += "&lt;";
    else if (c == '>') out += "&gt;";
    else if (c == '&') out += "&amp;";
    else out += c;
  }
  return out;
}

std::string num(double v) {
  std::ostringstream os;
  os.precision(5);
  os << v;
  return os.str();
}

void axis_labels(std::ostringstream& svg, const Frame& f, const ChartOptions& opt) {
  svg << "<rect x='" << f.px0 << "' y='" << f.py0 << "' width='" << f.px1 - f.px0 << "' height='"
      << f.py1 - f.py0 << "' fill='none' stroke='#444'/>\n";
  const int ticks = 5;
  for (int i = 0; i <= ticks; ++i) {
    const double t = static_cast<double>(i) / ticks;
    double xv;
    if (f.log_x) {
      xv = std::pow(10.0, std::log10(f.x0) + t * (std::log10(f.x1) - std::log10(f.x0)));
    } else {
      xv = f.x0 + t * (f.x1 - f.x0);
    }
    const double px = f.px0 + t * (f.px1 - f.px0);
    svg << "<line x1='" << px << "' y1='" << f.py1 << "' x2='" << px << "' y2='" << f.py1 + 4
        << "' stroke='#444'/>\n";
    svg << "<text x='" << px << "' y='" << f.py1 + 16 << "' font-size='10' text-anchor='middle'>"
        << num(xv) << "</text>\n";
    const double yv = f.y0 + t * (f.y1 - f.y0);
    const double py = f.fy(yv);
    svg << "<line x1='" << f.px0 - 4 << "' y1='" << py << "' x2='" << f.px0 << "' y2='" << py
        << "' stroke='#444'/>\n";
    svg << "<text x='" << f.px0 - 6 << "' y='" << py + 3 << "' font-size='10' text-anchor='end'>"
        << num(yv) << "</text>\n";
  }
  svg << "<text x='" << (f.px0 + f.px1) / 2 << "' y='" << f.py1 + 32
      << "' font-size='12' text-anchor='middle'>" << esc(opt.x_label) << "</text>\n";
  svg << "<text x='14' y='" << (f.py0 + f.py1) / 2 << "' font-size='12' text-anchor='middle' "
      << "transform='rotate(-90 14 " << (f.py0 + f.py1) / 2 << ")'>" << esc(opt.y_label)
      << "</text>\n";
  svg << "<text x='" << (f.px0 + f.px1) / 2 << "' y='16' font-size='13' text-anchor='middle'>"
      << esc(opt.title) << "</text>\n";
}

}  // namespace

std::string line_chart_svg(const std::vector<ChartSeries>& series, const ChartOptions& opt) {
  double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
  for (const auto& s : series)
    for (std::size_t i = 0; i < s.xs.size(); ++i) {
      if (!std::isfinite(s.xs[i]) || !std::isfinite(s.ys[i])) continue;
      if (opt.log_x && !(s.xs[i] > 0)) continue;
      x0 = std::min(x0, s.xs[i]);
      x1 = std::max(x1, s.xs[i]);
      y0 = std::min(y0, s.ys[i]);
      y1 = std::max(y1, s.ys[i]);
    }
  if (!std::isfinite(x0) || !std::isfinite(y0)) {
    x0 = 0; x1 = 1; y0 = 0; y1 = 1;
  }
  if (x0 == x1) { x0 -= 0.5; x1 += 0.5; }
  if (y0 == y1) { y0 -= 0.5; y1 += 0.5; }
  const double pad = 0.05 * (y1 - y0);
  y0 -= pad;
  y1 += pad;

  Frame f{x0, y0, x1, y1, 56, 28, opt.width - 130, opt.height - 44, opt.log_x};
  std::ostringstream svg;
  svg << "<svg xmlns='http://www.w3.org/2000/svg' width='" << opt.width << "' height='"
      << opt.height << "'>\n<rect width='100%' height='100%' fill='white'/>\n";
  axis_labels(svg, f, opt);
  int color = 0;
  for (const auto& s : series) {
    const char* c = kPalette[color % 8];
    svg << "<polyline fill='none' stroke='" << c << "' stroke-width='1.5' points='";
    for (std::size_t i = 0; i < s.xs.size(); ++i) {
      if (!std::isfinite(s.xs[i]) || !std::isfinite(s.ys[i])) continue;
      if (opt.log_x && !(s.xs[i] > 0)) continue;
      svg << num(f.fx(s.xs[i])) << ',' << num(f.fy(s.ys[i])) << ' ';
    }
    svg << "'/>\n";
    for (std::size_t i = 0; i < s.xs.size(); ++i) {
      if (!std::isfinite(s.xs[i]) || !std::isfinite(s.ys[i])) continue;
      if (opt.log_x && !(s.xs[i] > 0)) continue;
      svg << "<circle cx='" << num(f.fx(s.xs[i])) << "' cy='" << num(f.fy(s.ys[i]))
          << "' r='2.4' fill='" << c << "'/>\n";
    }
    svg << "<rect x='" << opt.width - 120 << "' y='" << 32 + 16 * color
        << "' width='10' height='10' fill='" << c << "'/>\n";
    svg << "<text x='" << opt.width - 106 << "' y='" << 41 + 16 * color << "' font-size='10'>"
        << esc(s.label) << "</text>\n";
    ++color;
  }
  svg << "</svg>\n";
  return svg.str();
}

std::string heatmap_svg(const std::vector<double>& xs, const std::vector<double>& ys,
                        const std::vector<double>& values, const ChartOptions& opt,
                        const std::vector<HeatmapAnchor>& anchors) {
  if (values.size() != xs.size() * ys.size())
    throw std::invalid_argument("heatmap_svg: grid size mismatch");
  double v0 = std::numeric_limits<double>::infinity(), v1 = -v0;
  for (double v : values)
    if (std::isfinite(v)) {
      v0 = std::min(v0, v);
      v1 = std::max(v1, v);
    }
  if (!std::isfinite(v0)) { v0 = 0; v1 = 1; }
  if (v0 == v1) v1 = v0 + 1;

  Frame f{xs.front(), ys.front(), xs.back(), ys.back(), 56, 28, opt.width - 90,
          opt.height - 44, false};
  std::ostringstream svg;
  svg << "<svg xmlns='http://www.w3.org/2000/svg' width='" << opt.width << "' height='"
      << opt.height << "'>\n<rect width='100%' height='100%' fill='white'/>\n";
  const double cw = static_cast<double>(f.px1 - f.px0) / xs.size();
  const double ch = static_cast<double>(f.py1 - f.py0) / ys.size();
  for (std::size_t j = 0; j < ys.size(); ++j)
    for (std::size_t i = 0; i < xs.size(); ++i) {
      const double v = values[j * xs.size() + i];
      double t = std::isfinite(v) ? (v - v0) / (v1 - v0) : 1.0;
      t = std::clamp(t, 0.0, 1.0);
      // dark blue (low) -> yellow (high)
      const int r = static_cast<int>(20 + 235 * t);
      const int g = static_cast<int>(30 + 200 * t);
      const int b = static_cast<int>(120 * (1.0 - t) + 40);
      svg << "<rect x='" << num(f.px0 + i * cw) << "' y='" << num(f.py1 - (j + 1) * ch)
          << "' width='" << num(cw + 0.5) << "' height='" << num(ch + 0.5) << "' fill='rgb(" << r
          << ',' << g << ',' << b << ")'/>\n";
    }
  axis_labels(svg, f, opt);
  for (const auto& a : anchors) {
    svg << "<circle cx='" << num(f.fx(a.x)) << "' cy='" << num(f.fy(a.y))
        << "' r='4' fill='white' stroke='black'/>\n";
    svg << "<text x='" << num(f.fx(a.x) + 6) << "' y='" << num(f.fy(a.y) - 6)
        << "' font-size='11' fill='black'>" << esc(a.label) << "</text>\n";
  }
  // color bar
  const int bar_x = opt.width - 26;
  for (int i = 0; i < 100; ++i) {
    const double t = 1.0 - static_cast<double>(i) / 99.0;
    const int r = static_cast<int>(20 + 235 * t);
    const int g = static_cast<int>(30 + 200 * t);
    const int b = static_cast<int>(120 * (1.0 - t) + 40);
    svg << "<rect x='" << bar_x << "' y='" << 28 + i * 3 << "' width='12' height='3' fill='rgb("
        << r << ',' << g << ',' << b << ")'/>\n";
  }
  svg << "<text x='" << bar_x - 4 << "' y='34' font-size='9' text-anchor='end'>" << num(v1)
      << "</text>\n";
  svg << "<text x='" << bar_x - 4 << "' y='" << 28 + 300 << "' font-size='9' text-anchor='end'>"
      << num(v0) << "</text>\n";
  svg << "</svg>\n";
  return svg.str();
}

}  // namespace mergelab
