/*
 * svg.hpp
 *
 * Minimal line-plot rendering for DET curves and sigma distributions.
 */
#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "eval.hpp"

namespace dpkws {

struct Series {
  std::string label;
  std::string color;
  std::vector<double> x;
  std::vector<double> y;
  bool dashed = false;
};

struct PlotSpec {
  std::string title;
  std::string x_label;
  std::string y_label;
  bool log_x = false;
  int width = 640;
  int height = 400;
};

inline void render_svg(std::ostream& os, const PlotSpec& spec, std::span<const Series> series) {
  double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
  auto tx = [&](double v) { return spec.log_x ? std::log10(std::max(v, 1e-12)) : v; };
  for (const auto& s : series)
    for (std::size_t i = 0; i < s.x.size() && i < s.y.size(); ++i) {
      if (!std::isfinite(s.y[i])) continue;
      x0 = std::min(x0, tx(s.x[i]));
      x1 = std::max(x1, tx(s.x[i]));
      y0 = std::min(y0, s.y[i]);
      y1 = std::max(y1, s.y[i]);
    }
  if (!std::isfinite(x0)) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  if (x1 == x0) x1 = x0 + 1;
  if (y1 == y0) y1 = y0 + 1;
  const double ml = 60, mr = 140, mt = 30, mb = 45;
  const double pw = spec.width - ml - mr, ph = spec.height - mt - mb;
  auto px = [&](double v) { return ml + (tx(v) - x0) / (x1 - x0) * pw; };
  auto py = [&](double v) { return mt + (1.0 - (v - y0) / (y1 - y0)) * ph; };

  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << spec.width << "\" height=\"" << spec.height
     << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << ml << "\" y=\"18\" font-size=\"13\">" << spec.title << "</text>\n";
  os << "<rect x=\"" << ml << "\" y=\"" << mt << "\" width=\"" << pw << "\" height=\"" << ph
     << "\" fill=\"none\" stroke=\"#444\"/>\n";
  os << "<text x=\"" << ml + pw / 2 << "\" y=\"" << spec.height - 8 << "\" text-anchor=\"middle\">" << spec.x_label
     << "</text>\n";
  os << "<text x=\"14\" y=\"" << mt + ph / 2 << "\" transform=\"rotate(-90 14 " << mt + ph / 2
     << ")\" text-anchor=\"middle\">" << spec.y_label << "</text>\n";
  for (int i = 0; i <= 4; ++i) {
    const double yv = y0 + (y1 - y0) * i / 4.0;
    os << "<text x=\"" << ml - 4 << "\" y=\"" << py(yv) + 4 << "\" text-anchor=\"end\">" << yv << "</text>\n";
    const double xv = x0 + (x1 - x0) * i / 4.0;
    const double xl = spec.log_x ? std::pow(10.0, xv) : xv;
    os << "<text x=\"" << ml + pw * i / 4.0 << "\" y=\"" << mt + ph + 14 << "\" text-anchor=\"middle\">" << xl
       << "</text>\n";
  }
  int legend = 0;
  for (const auto& s : series) {
    os << "<polyline fill=\"none\" stroke=\"" << s.color << "\" stroke-width=\"1.5\""
       << (s.dashed ? " stroke-dasharray=\"4 3\"" : "") << " points=\"";
    for (std::size_t i = 0; i < s.x.size() && i < s.y.size(); ++i)
      if (std::isfinite(s.y[i])) os << px(s.x[i]) << ',' << py(s.y[i]) << ' ';
    os << "\"/>\n";
    const double ly = mt + 12 + 16 * legend++;
    os << "<line x1=\"" << ml + pw + 10 << "\" y1=\"" << ly << "\" x2=\"" << ml + pw + 30 << "\" y2=\"" << ly
       << "\" stroke=\"" << s.color << "\"/>\n";
    os << "<text x=\"" << ml + pw + 34 << "\" y=\"" << ly + 4 << "\">" << s.label << "</text>\n";
  }
  os << "</svg>\n";
}

inline void render_det_svg(std::ostream& os, std::span<const DetPoint> pts) {
  Series s{"FRR", "#1f77b4", {}, {}};
  for (const auto& p : pts) {
    s.x.push_back(p.fa_per_hour);
    s.y.push_back(p.frr);
  }
  render_svg(os, {"DET curve", "false alarms per hour", "false reject ratio", true}, std::span(&s, 1));
}

/// Class sigmas: median with +/-1,2,3 std bands and min/max; instance sigmas:
/// mean +/- std for clean and noisy utterances.
inline void render_sigma_svg(std::ostream& os, std::span<const EpochSigmaStats> report) {
  std::vector<Series> series;
  Series med{"class median", "#d62728"}, mn{"class min", "#7f7f7f"}, mx{"class max", "#7f7f7f"};
  std::vector<Series> bands;
  for (int k = 1; k <= 3; ++k) {
    bands.push_back({detail::concat("median-", k, "sd"), "#ff9896", {}, {}, true});
    bands.push_back({detail::concat("median+", k, "sd"), "#ff9896", {}, {}, true});
  }
  Series cm{"clean inst. mean", "#2ca02c"}, nm{"noisy inst. mean", "#9467bd"};
  Series cs{"clean inst. sd", "#98df8a", {}, {}, true}, ns{"noisy inst. sd", "#c5b0d5", {}, {}, true};
  for (const auto& e : report) {
    const double x = e.epoch;
    if (e.class_sigma) {
      const auto& c = *e.class_sigma;
      med.x.push_back(x), med.y.push_back(c.median);
      mn.x.push_back(x), mn.y.push_back(c.min);
      mx.x.push_back(x), mx.y.push_back(c.max);
      for (int k = 1; k <= 3; ++k) {
        bands[static_cast<std::size_t>(2 * k - 2)].x.push_back(x);
        bands[static_cast<std::size_t>(2 * k - 2)].y.push_back(c.median - k * c.stddev);
        bands[static_cast<std::size_t>(2 * k - 1)].x.push_back(x);
        bands[static_cast<std::size_t>(2 * k - 1)].y.push_back(c.median + k * c.stddev);
      }
    }
    if (e.instance_clean) cm.x.push_back(x), cm.y.push_back(e.instance_clean->mean), cs.x.push_back(x),
        cs.y.push_back(e.instance_clean->stddev);
    if (e.instance_noisy) nm.x.push_back(x), nm.y.push_back(e.instance_noisy->mean), ns.x.push_back(x),
        ns.y.push_back(e.instance_noisy->stddev);
  }
  if (!med.x.empty()) {
    series.push_back(med);
    series.push_back(mn);
    series.push_back(mx);
    for (auto& b : bands) series.push_back(b);
  }
  for (auto* s : {&cm, &nm, &cs, &ns})
    if (!s->x.empty()) series.push_back(*s);
  render_svg(os, {"data parameter distributions", "epoch", "sigma", false}, series);
}

}  // namespace dpkws
