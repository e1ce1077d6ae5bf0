#pragma once

#include <algorithm>
#include <cstdio>
#include <ostream>
#include <string>
#include <vector>

#include "fpcnet/inspect.hpp"

namespace fpcnet::svg {

namespace detail {
inline std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

inline std::string gray(double level) {
  const int v = 255 - static_cast<int>(std::clamp(level, 0.0, 1.0) * 255.0 + 0.5);
  char buf[16];
  std::snprintf(buf, sizeof buf, "#%02x%02x%02x", v, v, v);
  return buf;
}
}  // namespace detail

/// 2-D histogram as a grayscale heatmap (darker = more mass), x right, y up.
inline void write_heatmap(std::ostream& os, const WeightedHistogram& h, const std::string& title,
                          const std::string& x_label = "R/G", const std::string& y_label = "B/G") {
  constexpr int cell = 6, margin = 40;
  const int W = static_cast<int>(h.bins_x()) * cell, H = static_cast<int>(h.bins_y()) * cell;
  double peak = 0.0;
  for (double v : h.mass()) peak = std::max(peak, v);
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W + 2 * margin << "\" height=\"" << H + 2 * margin
     << "\">\n<title>" << title << "</title>\n";
  os << "<rect x=\"" << margin << "\" y=\"" << margin << "\" width=\"" << W << "\" height=\"" << H
     << "\" fill=\"#ffffff\" stroke=\"#000000\"/>\n";
  for (std::size_t j = 0; j < h.bins_y(); ++j)
    for (std::size_t i = 0; i < h.bins_x(); ++i) {
      const double m = h.at(i, j);
      if (m <= 0.0 || peak <= 0.0) continue;
      os << "<rect x=\"" << margin + static_cast<int>(i) * cell << "\" y=\""
         << margin + H - static_cast<int>(j + 1) * cell << "\" width=\"" << cell << "\" height=\"" << cell
         << "\" fill=\"" << detail::gray(m / peak) << "\"/>\n";
    }
  os << "<text x=\"" << margin + W / 2 << "\" y=\"" << H + margin + 28 << "\" text-anchor=\"middle\">" << x_label
     << " (" << detail::num(h.lo()) << " to " << detail::num(h.hi()) << ")</text>\n";
  os << "<text x=\"12\" y=\"" << margin + H / 2 << "\" transform=\"rotate(-90 12 " << margin + H / 2
     << ")\" text-anchor=\"middle\">" << y_label << "</text>\n";
  os << "<text x=\"" << margin << "\" y=\"24\">" << title << "</text>\n</svg>\n";
}

/// One or more cumulative curves normalized to their own totals.
inline void write_curves(std::ostream& os, const std::vector<std::pair<std::string, std::vector<double>>>& curves,
                         double x_lo, double x_hi, const std::string& title) {
  constexpr int W = 480, H = 320, margin = 48;
  static const char* colors[] = {"#1f5fa8", "#c0392b", "#27804a", "#7d3c98"};
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W + 2 * margin << "\" height=\"" << H + 2 * margin
     << "\">\n<title>" << title << "</title>\n";
  os << "<rect x=\"" << margin << "\" y=\"" << margin << "\" width=\"" << W << "\" height=\"" << H
     << "\" fill=\"none\" stroke=\"#000000\"/>\n";
  for (std::size_t k = 0; k < curves.size(); ++k) {
    const auto& c = curves[k].second;
    if (c.empty()) continue;
    const double total = c.back() > 0.0 ? c.back() : 1.0;
    os << "<polyline fill=\"none\" stroke=\"" << colors[k % 4] << "\" points=\"";
    for (std::size_t i = 0; i < c.size(); ++i) {
      const double x = margin + W * (static_cast<double>(i) + 1.0) / static_cast<double>(c.size());
      const double y = margin + H * (1.0 - c[i] / total);
      os << detail::num(x) << ',' << detail::num(y) << ' ';
    }
    os << "\"/>\n<text x=\"" << margin + 8 << "\" y=\"" << margin + 18 + 16 * static_cast<int>(k) << "\" fill=\""
       << colors[k % 4] << "\">" << curves[k].first << "</text>\n";
  }
  os << "<text x=\"" << margin << "\" y=\"" << H + margin + 28 << "\">" << detail::num(x_lo) << "</text>\n";
  os << "<text x=\"" << margin + W << "\" y=\"" << H + margin + 28 << "\" text-anchor=\"end\">" << detail::num(x_hi)
     << "</text>\n";
  os << "<text x=\"" << margin << "\" y=\"24\">" << title << "</text>\n</svg>\n";
}

}  // namespace fpcnet::svg
