#include "ikdmil/plot.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>

#include "ikdmil/common.hpp"

namespace ikdmil {

namespace {

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd",
                          "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f"};

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

// "Nice" tick step close to range/desired (1, 2, or 5 times a power of ten).
double nice_step(double range, int desired) {
  if (range <= 0.0) return 1.0;
  const double raw = range / std::max(1, desired);
  const double mag = std::pow(10.0, std::floor(std::log10(raw)));
  const double frac = raw / mag;
  double nice = 10.0;
  if (frac <= 1.0)
    nice = 1.0;
  else if (frac <= 2.0)
    nice = 2.0;
  else if (frac <= 5.0)
    nice = 5.0;
  return nice * mag;
}

std::string xml_escape(const std::string& s) {
  std::string out;
  out.reserve(s.size());
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

}  // namespace

void write_svg_line_plot(const std::filesystem::path& path, const PlotSpec& spec,
                         const std::vector<PlotSeries>& series) {
  if (series.empty()) throw PreconditionError("plot has no series");
  double xmin = std::numeric_limits<double>::infinity(), xmax = -xmin;
  double ymin = xmin, ymax = -xmin;
  for (const PlotSeries& s : series) {
    if (s.x.size() != s.y.size()) {
      throw PreconditionError("plot series '" + s.label + "' has mismatched x/y lengths");
    }
    if (!s.yerr.empty() && s.yerr.size() != s.y.size()) {
      throw PreconditionError("plot series '" + s.label + "' has mismatched error lengths");
    }
    for (size_t i = 0; i < s.x.size(); ++i) {
      const double e = s.yerr.empty() ? 0.0 : s.yerr[i];
      xmin = std::min(xmin, s.x[i]);
      xmax = std::max(xmax, s.x[i]);
      ymin = std::min(ymin, s.y[i] - e);
      ymax = std::max(ymax, s.y[i] + e);
    }
  }
  if (!std::isfinite(xmin) || !std::isfinite(ymin)) {
    throw PreconditionError("plot has no data points");
  }
  if (xmax == xmin) xmax = xmin + 1.0;
  if (ymax == ymin) {
    ymax += 0.5;
    ymin -= 0.5;
  }
  const double ypad = 0.06 * (ymax - ymin);
  ymin -= ypad;
  ymax += ypad;

  const int W = spec.width, H = spec.height;
  const double ml = 70, mr = 24, mt = 42, mb = 52;  // margins
  const double pw = W - ml - mr, ph = H - mt - mb;
  const auto X = [&](double x) { return ml + (x - xmin) / (xmax - xmin) * pw; };
  const auto Y = [&](double y) { return mt + (ymax - y) / (ymax - ymin) * ph; };

  std::ofstream out(path);
  if (!out) throw IoError("cannot write plot " + path.string());
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
      << "\" viewBox=\"0 0 " << W << " " << H << "\">\n";
  out << "<rect width=\"" << W << "\" height=\"" << H << "\" fill=\"white\"/>\n";
  out << "<text x=\"" << W / 2 << "\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\""
      << " font-size=\"16\">" << xml_escape(spec.title) << "</text>\n";

  // Grid + ticks.
  const double xstep = nice_step(xmax - xmin, 8);
  const double ystep = nice_step(ymax - ymin, 6);
  out << "<g font-family=\"sans-serif\" font-size=\"11\" fill=\"#333\">\n";
  for (double t = std::ceil(xmin / xstep) * xstep; t <= xmax + 1e-9; t += xstep) {
    const double px = X(t);
    out << "<line x1=\"" << fmt(px) << "\" y1=\"" << fmt(mt) << "\" x2=\"" << fmt(px)
        << "\" y2=\"" << fmt(mt + ph) << "\" stroke=\"#e0e0e0\"/>\n";
    out << "<text x=\"" << fmt(px) << "\" y=\"" << fmt(mt + ph + 16)
        << "\" text-anchor=\"middle\">" << fmt(t) << "</text>\n";
  }
  for (double t = std::ceil(ymin / ystep) * ystep; t <= ymax + 1e-9; t += ystep) {
    const double py = Y(t);
    out << "<line x1=\"" << fmt(ml) << "\" y1=\"" << fmt(py) << "\" x2=\"" << fmt(ml + pw)
        << "\" y2=\"" << fmt(py) << "\" stroke=\"#e0e0e0\"/>\n";
    out << "<text x=\"" << fmt(ml - 8) << "\" y=\"" << fmt(py + 4)
        << "\" text-anchor=\"end\">" << fmt(t) << "</text>\n";
  }
  out << "</g>\n";

  // Axes.
  out << "<rect x=\"" << fmt(ml) << "\" y=\"" << fmt(mt) << "\" width=\"" << fmt(pw)
      << "\" height=\"" << fmt(ph) << "\" fill=\"none\" stroke=\"#444\"/>\n";
  out << "<text x=\"" << W / 2 << "\" y=\"" << H - 12
      << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\">"
      << xml_escape(spec.xlabel) << "</text>\n";
  out << "<text x=\"18\" y=\"" << H / 2
      << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\""
      << " transform=\"rotate(-90 18 " << H / 2 << ")\">" << xml_escape(spec.ylabel)
      << "</text>\n";

  // Series.
  for (size_t si = 0; si < series.size(); ++si) {
    const PlotSeries& s = series[si];
    const char* color = kPalette[si % (sizeof(kPalette) / sizeof(kPalette[0]))];
    if (!s.yerr.empty()) {
      for (size_t i = 0; i < s.x.size(); ++i) {
        if (s.yerr[i] <= 0.0) continue;
        const double px = X(s.x[i]);
        const double y0 = Y(s.y[i] - s.yerr[i]), y1 = Y(s.y[i] + s.yerr[i]);
        out << "<line x1=\"" << fmt(px) << "\" y1=\"" << fmt(y0) << "\" x2=\"" << fmt(px)
            << "\" y2=\"" << fmt(y1) << "\" stroke=\"" << color << "\" stroke-width=\"1\"/>\n";
        out << "<line x1=\"" << fmt(px - 3) << "\" y1=\"" << fmt(y0) << "\" x2=\""
            << fmt(px + 3) << "\" y2=\"" << fmt(y0) << "\" stroke=\"" << color << "\"/>\n";
        out << "<line x1=\"" << fmt(px - 3) << "\" y1=\"" << fmt(y1) << "\" x2=\""
            << fmt(px + 3) << "\" y2=\"" << fmt(y1) << "\" stroke=\"" << color << "\"/>\n";
      }
    }
    out << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.8\" points=\"";
    for (size_t i = 0; i < s.x.size(); ++i) {
      out << fmt(X(s.x[i])) << ',' << fmt(Y(s.y[i])) << ' ';
    }
    out << "\"/>\n";
    for (size_t i = 0; i < s.x.size(); ++i) {
      out << "<circle cx=\"" << fmt(X(s.x[i])) << "\" cy=\"" << fmt(Y(s.y[i]))
          << "\" r=\"2.6\" fill=\"" << color << "\"/>\n";
    }
  }

  // Legend, top-right inside the plot area.
  const double lx = ml + pw - 170, ly = mt + 12;
  out << "<g font-family=\"sans-serif\" font-size=\"12\">\n";
  out << "<rect x=\"" << fmt(lx - 8) << "\" y=\"" << fmt(ly - 12) << "\" width=\"178\" height=\""
      << fmt(series.size() * 18.0 + 8) << "\" fill=\"white\" stroke=\"#bbb\"/>\n";
  for (size_t si = 0; si < series.size(); ++si) {
    const char* color = kPalette[si % (sizeof(kPalette) / sizeof(kPalette[0]))];
    const double yy = ly + si * 18.0;
    out << "<line x1=\"" << fmt(lx) << "\" y1=\"" << fmt(yy) << "\" x2=\"" << fmt(lx + 22)
        << "\" y2=\"" << fmt(yy) << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
    out << "<text x=\"" << fmt(lx + 28) << "\" y=\"" << fmt(yy + 4) << "\">"
        << xml_escape(series[si].label) << "</text>\n";
  }
  out << "</g>\n</svg>\n";
  if (!out.good()) throw IoError("failed while writing plot " + path.string());
}

}  // namespace ikdmil
