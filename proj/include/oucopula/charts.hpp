#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "oucopula/metrics.hpp"

namespace oucopula::charts {

namespace detail {

inline std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

inline std::string label(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

inline std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<':
        out += "&lt;";
        break;
      case '>':
        out += "&gt;";
        break;
      case '&':
        out += "&amp;";
        break;
      case '"':
        out += "&quot;";
        break;
      default:
        out += c;
    }
  }
  return out;
}

inline constexpr std::array<const char*, 6> kPalette{"#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860"};

// Panel grid mirroring the nine-way breakdown: rows OS, OD, OU; columns SE, AL, SE+AL.
inline constexpr std::array<std::array<const char*, 3>, 3> kGrid{{{"os_se", "os_al", "os_total"},
                                                                  {"od_se", "od_al", "od_total"},
                                                                  {"ou_se", "ou_al", "ou_total"}}};
inline constexpr std::array<const char*, 3> kRowNames{"OS", "OD", "OU"};
inline constexpr std::array<const char*, 3> kColNames{"SE", "AL", "SE+AL"};

inline constexpr double kPanelW = 260, kPanelH = 200, kMargin = 40, kLegendH = 30;

struct Frame {
  double x0, y0, w, h, ymax;
  double y(double v) const { return y0 + h - h * (ymax > 0 ? v / ymax : 0.0); }
};

inline std::string begin_svg(const std::string& title, std::size_t series, const std::vector<std::string>& names) {
  const double width = 3 * kPanelW + 2 * kMargin, height = 3 * kPanelH + 2 * kMargin + kLegendH;
  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << num(width) << "\" height=\"" << num(height)
    << "\" viewBox=\"0 0 " << num(width) << ' ' << num(height) << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s << "<text x=\"" << num(width / 2) << "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">" << escape(title)
    << "</text>\n";
  for (std::size_t i = 0; i < series; ++i) {
    const double x = kMargin + static_cast<double>(i) * 180.0;
    s << "<rect x=\"" << num(x) << "\" y=\"" << num(height - 22) << "\" width=\"12\" height=\"12\" fill=\""
      << kPalette[i % kPalette.size()] << "\"/>";
    s << "<text x=\"" << num(x + 16) << "\" y=\"" << num(height - 12) << "\">" << escape(names[i]) << "</text>\n";
  }
  return s.str();
}

inline Frame panel(std::ostringstream& s, std::size_t r, std::size_t c, double ymax) {
  const double x0 = kMargin + static_cast<double>(c) * kPanelW + 36, y0 = kMargin + static_cast<double>(r) * kPanelH + 18;
  Frame f{x0, y0, kPanelW - 50, kPanelH - 44, ymax};
  s << "<text x=\"" << num(x0 + f.w / 2) << "\" y=\"" << num(y0 - 6) << "\" text-anchor=\"middle\">" << kRowNames[r] << ' '
    << kColNames[c] << " MSE</text>\n";
  s << "<line x1=\"" << num(x0) << "\" y1=\"" << num(y0) << "\" x2=\"" << num(x0) << "\" y2=\"" << num(y0 + f.h)
    << "\" stroke=\"black\"/>";
  s << "<line x1=\"" << num(x0) << "\" y1=\"" << num(y0 + f.h) << "\" x2=\"" << num(x0 + f.w) << "\" y2=\""
    << num(y0 + f.h) << "\" stroke=\"black\"/>\n";
  for (int t = 0; t <= 4; ++t) {
    const double v = ymax * t / 4.0;
    s << "<text x=\"" << num(x0 - 4) << "\" y=\"" << num(f.y(v) + 4) << "\" text-anchor=\"end\" font-size=\"9\">"
      << label(v) << "</text>";
  }
  s << '\n';
  return f;
}

inline double nice_max(double v) {
  if (!(v > 0)) return 1.0;
  const double mag = std::pow(10.0, std::floor(std::log10(v)));
  for (double step : {1.0, 1.2, 1.5, 2.0, 2.5, 3.0, 4.0, 5.0, 6.0, 8.0, 10.0}) {
    if (step * mag >= v) return step * mag;
  }
  return 10 * mag;
}

}  // namespace detail

/// 3 x 3 grid of bar charts, one bar per named report in each panel.
inline std::string metric_bars(const std::string& title, const std::vector<std::pair<std::string, MetricsReport>>& series) {
  using namespace detail;
  std::vector<std::string> names;
  for (const auto& [n, r] : series) names.push_back(n);
  std::ostringstream s;
  s << begin_svg(title, series.size(), names);
  for (std::size_t r = 0; r < 3; ++r) {
    for (std::size_t c = 0; c < 3; ++c) {
      double top = 0;
      for (const auto& [n, rep] : series) top = std::max(top, rep.get(kGrid[r][c]));
      const Frame f = panel(s, r, c, nice_max(top));
      const double slot = f.w / static_cast<double>(std::max<std::size_t>(series.size(), 1));
      for (std::size_t i = 0; i < series.size(); ++i) {
        const double v = series[i].second.get(kGrid[r][c]);
        const double x = f.x0 + slot * static_cast<double>(i) + slot * 0.15;
        s << "<rect x=\"" << num(x) << "\" y=\"" << num(f.y(v)) << "\" width=\"" << num(slot * 0.7) << "\" height=\""
          << num(f.y0 + f.h - f.y(v)) << "\" fill=\"" << kPalette[i % kPalette.size()] << "\"><title>"
          << escape(series[i].first) << ": " << label(v) << "</title></rect>\n";
      }
    }
  }
  s << "</svg>\n";
  return s.str();
}

/// 3 x 3 grid of box plots (min, quartiles, median, max) over folds, one box per group.
inline std::string fold_boxes(const std::string& title,
                              const std::vector<std::pair<std::string, std::vector<MetricsReport>>>& groups) {
  using namespace detail;
  std::vector<std::string> names;
  for (const auto& [n, g] : groups) names.push_back(n);
  auto quantile = [](std::vector<double> v, double q) {
    std::sort(v.begin(), v.end());
    const double pos = q * static_cast<double>(v.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, v.size() - 1);
    return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
  };
  std::ostringstream s;
  s << begin_svg(title, groups.size(), names);
  for (std::size_t r = 0; r < 3; ++r) {
    for (std::size_t c = 0; c < 3; ++c) {
      double top = 0;
      for (const auto& [n, reps] : groups) {
        for (const auto& rep : reps) top = std::max(top, rep.get(kGrid[r][c]));
      }
      const Frame f = panel(s, r, c, nice_max(top));
      const double slot = f.w / static_cast<double>(std::max<std::size_t>(groups.size(), 1));
      for (std::size_t i = 0; i < groups.size(); ++i) {
        if (groups[i].second.empty()) continue;
        std::vector<double> v;
        for (const auto& rep : groups[i].second) v.push_back(rep.get(kGrid[r][c]));
        const double q0 = quantile(v, 0), q1 = quantile(v, 0.25), q2 = quantile(v, 0.5), q3 = quantile(v, 0.75),
                     q4 = quantile(v, 1);
        const double x = f.x0 + slot * static_cast<double>(i) + slot * 0.2, w = slot * 0.6, mid = x + w / 2;
        const char* color = kPalette[i % kPalette.size()];
        s << "<line x1=\"" << num(mid) << "\" y1=\"" << num(f.y(q4)) << "\" x2=\"" << num(mid) << "\" y2=\""
          << num(f.y(q0)) << "\" stroke=\"" << color << "\"/>";
        s << "<rect x=\"" << num(x) << "\" y=\"" << num(f.y(q3)) << "\" width=\"" << num(w) << "\" height=\""
          << num(std::max(0.5, f.y(q1) - f.y(q3))) << "\" fill=\"white\" stroke=\"" << color << "\"/>";
        s << "<line x1=\"" << num(x) << "\" y1=\"" << num(f.y(q2)) << "\" x2=\"" << num(x + w) << "\" y2=\""
          << num(f.y(q2)) << "\" stroke=\"" << color << "\" stroke-width=\"2\"><title>" << escape(groups[i].first)
          << " median " << label(q2) << "</title></line>\n";
      }
    }
  }
  s << "</svg>\n";
  return s.str();
}

}  // namespace oucopula::charts
