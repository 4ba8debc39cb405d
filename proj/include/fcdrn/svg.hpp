// Minimal standalone SVG bar charts for the analysis reports.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <string>
#include <vector>

namespace fcdrn::svg {

struct Bar {
  std::string label;
  double value = 0.0;
};

inline std::string escape(const std::string& s) {
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

inline std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

/// Bars may be negative; the zero line is drawn. `separators` are bar indices preceded by a vertical rule.
inline std::string bar_chart(const std::string& title, const std::string& x_label, const std::string& y_label,
                             const std::vector<Bar>& bars, const std::vector<std::size_t>& separators) {
  const double left = 70, right = 20, top = 40, bottom = 70;
  const double slot = std::clamp(600.0 / std::max<std::size_t>(bars.size(), 1), 6.0, 48.0);
  const double plot_w = slot * static_cast<double>(std::max<std::size_t>(bars.size(), 1));
  const double plot_h = 260;
  const double width = left + plot_w + right, height = top + plot_h + bottom;

  double lo = 0.0, hi = 0.0;
  for (const auto& b : bars) {
    if (std::isfinite(b.value)) {
      lo = std::min(lo, b.value);
      hi = std::max(hi, b.value);
    }
  }
  if (hi - lo <= 0.0) hi = lo + 1.0;
  auto y_of = [&](double v) { return top + plot_h * (hi - v) / (hi - lo); };

  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << fmt(width) << "\" height=\"" << fmt(height)
     << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << fmt(width / 2) << "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">" << escape(title)
     << "</text>\n";
  os << "<line x1=\"" << fmt(left) << "\" y1=\"" << fmt(top) << "\" x2=\"" << fmt(left) << "\" y2=\""
     << fmt(top + plot_h) << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << fmt(left) << "\" y1=\"" << fmt(y_of(0)) << "\" x2=\"" << fmt(left + plot_w) << "\" y2=\""
     << fmt(y_of(0)) << "\" stroke=\"black\"/>\n";
  for (double v : {lo, hi}) {
    os << "<text x=\"" << fmt(left - 4) << "\" y=\"" << fmt(y_of(v) + 4) << "\" text-anchor=\"end\">" << fmt(v)
       << "</text>\n";
  }
  for (std::size_t i = 0; i < bars.size(); ++i) {
    const double v = std::isfinite(bars[i].value) ? bars[i].value : 0.0;
    const double x = left + slot * static_cast<double>(i) + slot * 0.15;
    const double y0 = y_of(std::max(v, 0.0)), y1 = y_of(std::min(v, 0.0));
    os << "<rect x=\"" << fmt(x) << "\" y=\"" << fmt(y0) << "\" width=\"" << fmt(slot * 0.7) << "\" height=\""
       << fmt(std::max(y1 - y0, 0.5)) << "\" fill=\"" << (v < 0 ? "#c0504d" : "#4f81bd") << "\"><title>"
       << escape(bars[i].label) << ": " << v << "</title></rect>\n";
    if (bars.size() <= 40) {
      const double cx = x + slot * 0.35, ly = top + plot_h + 14;
      os << "<text x=\"" << fmt(cx) << "\" y=\"" << fmt(ly) << "\" text-anchor=\"middle\">" << escape(bars[i].label)
         << "</text>\n";
    }
  }
  for (auto s : separators) {
    const double x = left + slot * static_cast<double>(s);
    os << "<line x1=\"" << fmt(x) << "\" y1=\"" << fmt(top) << "\" x2=\"" << fmt(x) << "\" y2=\"" << fmt(top + plot_h)
       << "\" stroke=\"gray\" stroke-dasharray=\"4,3\"/>\n";
  }
  os << "<text x=\"" << fmt(left + plot_w / 2) << "\" y=\"" << fmt(height - 20) << "\" text-anchor=\"middle\">"
     << escape(x_label) << "</text>\n";
  os << "<text transform=\"translate(16," << fmt(top + plot_h / 2) << ") rotate(-90)\" text-anchor=\"middle\">"
     << escape(y_label) << "</text>\n";
  os << "</svg>\n";
  return os.str();
}

}  // namespace fcdrn::svg
