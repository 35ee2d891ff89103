#pragma once

// Self-contained SVG rendering for Kaplan-Meier curves and mean gate weights.

#include <algorithm>
#include <cstdio>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "deref/eval.hpp"

namespace deref {

inline constexpr const char* kLowRiskColor = "#1f77b4";
inline constexpr const char* kHighRiskColor = "#ff7f0e";

namespace detail {

inline std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

struct Frame {
  double width = 640, height = 420, left = 60, right = 20, top = 30, bottom = 50;
  [[nodiscard]] double plot_w() const { return width - left - right; }
  [[nodiscard]] double plot_h() const { return height - top - bottom; }
};

inline void svg_open(std::ostringstream& os, const Frame& f, const std::string& title) {
  os << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
     << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << f.width << "\" height=\"" << f.height
     << "\" viewBox=\"0 0 " << f.width << ' ' << f.height << "\" font-family=\"sans-serif\" font-size=\"12\">\n"
     << "<title>" << title << "</title>\n"
     << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
     << "<line x1=\"" << f.left << "\" y1=\"" << f.top + f.plot_h() << "\" x2=\"" << f.left + f.plot_w() << "\" y2=\""
     << f.top + f.plot_h() << "\" stroke=\"black\"/>\n"
     << "<line x1=\"" << f.left << "\" y1=\"" << f.top << "\" x2=\"" << f.left << "\" y2=\"" << f.top + f.plot_h()
     << "\" stroke=\"black\"/>\n";
}

}  // namespace detail

inline std::string format_p_value(double p) {
  if (p < 1e-4) return detail::fmt("p = %.2e", p);
  return detail::fmt("p = %.4f", p);
}

/// Step curves for both risk groups, log-rank p annotated in the corner.
inline std::string render_km_svg(const KmCurve& low, const KmCurve& high, double p_value, double t_max) {
  const detail::Frame f;
  if (!(t_max > 0)) t_max = 1.0;
  auto x = [&](double t) { return f.left + f.plot_w() * std::clamp(t / t_max, 0.0, 1.0); };
  auto y = [&](double s) { return f.top + f.plot_h() * (1.0 - s); };

  std::ostringstream os;
  detail::svg_open(os, f, "Kaplan-Meier by risk group");
  for (int i = 0; i <= 4; ++i) {
    const double s = i / 4.0;
    os << "<text x=\"" << f.left - 8 << "\" y=\"" << y(s) + 4 << "\" text-anchor=\"end\">" << detail::fmt("%.2f", s)
       << "</text>\n";
    const double t = t_max * i / 4.0;
    os << "<text x=\"" << x(t) << "\" y=\"" << f.top + f.plot_h() + 18 << "\" text-anchor=\"middle\">"
       << detail::fmt("%.2f", t) << "</text>\n";
  }
  os << "<text x=\"" << f.left + f.plot_w() / 2 << "\" y=\"" << f.height - 8
     << "\" text-anchor=\"middle\">time</text>\n";

  auto curve = [&](const KmCurve& km, const char* color, const char* label) {
    std::ostringstream pts;
    double s = 1.0, prev_t = 0.0;
    pts << x(0) << ',' << y(1.0);
    for (std::size_t i = 0; i < km.times.size(); ++i) {
      prev_t = km.times[i];
      pts << ' ' << x(prev_t) << ',' << y(s);
      s = km.survival[i];
      pts << ' ' << x(prev_t) << ',' << y(s);
    }
    pts << ' ' << x(t_max) << ',' << y(s);
    os << "<polyline class=\"km\" data-group=\"" << label << "\" fill=\"none\" stroke=\"" << color
       << "\" stroke-width=\"2\" points=\"" << pts.str() << "\"/>\n";
  };
  curve(low, kLowRiskColor, "low");
  curve(high, kHighRiskColor, "high");

  const double lx = f.left + f.plot_w() - 130;
  os << "<rect x=\"" << lx << "\" y=\"" << f.top + 6 << "\" width=\"12\" height=\"12\" fill=\"" << kLowRiskColor
     << "\"/><text x=\"" << lx + 18 << "\" y=\"" << f.top + 16 << "\">low risk</text>\n"
     << "<rect x=\"" << lx << "\" y=\"" << f.top + 24 << "\" width=\"12\" height=\"12\" fill=\"" << kHighRiskColor
     << "\"/><text x=\"" << lx + 18 << "\" y=\"" << f.top + 34 << "\">high risk</text>\n"
     << "<text id=\"p-value\" x=\"" << lx << "\" y=\"" << f.top + 58 << "\">" << format_p_value(p_value)
     << "</text>\n</svg>\n";
  return os.str();
}

/// One bar per expert; the sum of the bars is annotated.
inline std::string render_gates_svg(const std::vector<double>& mean_gates) {
  const detail::Frame f;
  const double top = std::max(1e-12, *std::max_element(mean_gates.begin(), mean_gates.end()));
  const double n = static_cast<double>(mean_gates.size());
  const double slot = f.plot_w() / n;
  std::ostringstream os;
  detail::svg_open(os, f, "Mean gate weights");
  for (std::size_t i = 0; i < mean_gates.size(); ++i) {
    const double h = f.plot_h() * mean_gates[i] / top;
    const double bx = f.left + slot * (static_cast<double>(i) + 0.15);
    os << "<rect class=\"bar\" data-expert=\"" << i << "\" data-value=\"" << detail::fmt("%.17g", mean_gates[i])
       << "\" x=\"" << bx << "\" y=\"" << f.top + f.plot_h() - h << "\" width=\"" << slot * 0.7 << "\" height=\"" << h
       << "\" fill=\"" << kLowRiskColor << "\"/>\n"
       << "<text x=\"" << bx + slot * 0.35 << "\" y=\"" << f.top + f.plot_h() - h - 4 << "\" text-anchor=\"middle\">"
       << detail::fmt("%.4f", mean_gates[i]) << "</text>\n"
       << "<text x=\"" << bx + slot * 0.35 << "\" y=\"" << f.top + f.plot_h() + 18
       << "\" text-anchor=\"middle\">expert " << i << "</text>\n";
  }
  const double sum = std::accumulate(mean_gates.begin(), mean_gates.end(), 0.0);
  os << "<text id=\"gate-sum\" x=\"" << f.left + 8 << "\" y=\"" << f.top - 10 << "\">sum = " << detail::fmt("%.6f", sum)
     << "</text>\n</svg>\n";
  return os.str();
}

}  // namespace deref
