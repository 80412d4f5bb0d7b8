#include "lqrppg/plot.hpp"

#include "lqrppg/errors.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>

namespace lqrppg::plot {
namespace {

constexpr double kWidth = 640.0;
constexpr double kHeight = 420.0;
constexpr double kLeft = 70.0;
constexpr double kRight = 20.0;
constexpr double kTop = 40.0;
constexpr double kBottom = 60.0;

const char* const kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf"};

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

std::string tick(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
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

struct Range {
  double lo = std::numeric_limits<double>::infinity();
  double hi = -std::numeric_limits<double>::infinity();

  void add(double v) {
    if (!std::isfinite(v)) return;
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  // Empty ranges become [0, 1]; degenerate ones are widened by 1 on each side.
  Range padded() const {
    if (!(lo <= hi)) return {0.0, 1.0};
    if (hi - lo < 1e-12) return {lo - 1.0, hi + 1.0};
    const double pad = 0.05 * (hi - lo);
    return {lo - pad, hi + pad};
  }
};

class Canvas {
 public:
  Canvas(const Axes& axes, Range x, Range y) : x_(x), y_(y) {
    out_ << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth << "\" height=\"" << kHeight
         << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
    out_ << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    out_ << "<text x=\"" << num(kWidth / 2) << "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">"
         << escape(axes.title) << "</text>\n";
    out_ << "<text x=\"" << num(kLeft + plot_w() / 2) << "\" y=\"" << num(kHeight - 15)
         << "\" text-anchor=\"middle\">" << escape(axes.x_label) << "</text>\n";
    out_ << "<text x=\"18\" y=\"" << num(kTop + plot_h() / 2) << "\" text-anchor=\"middle\" transform=\"rotate(-90 18 "
         << num(kTop + plot_h() / 2) << ")\">" << escape(axes.y_label) << "</text>\n";
    out_ << "<rect x=\"" << num(kLeft) << "\" y=\"" << num(kTop) << "\" width=\"" << num(plot_w()) << "\" height=\""
         << num(plot_h()) << "\" fill=\"none\" stroke=\"black\"/>\n";
  }

  double px(double x) const { return kLeft + (x - x_.lo) / (x_.hi - x_.lo) * plot_w(); }
  double py(double y) const { return kTop + plot_h() - (y - y_.lo) / (y_.hi - y_.lo) * plot_h(); }

  void x_ticks() {
    for (int i = 0; i <= 4; ++i) {
      const double v = x_.lo + (x_.hi - x_.lo) * i / 4.0;
      out_ << "<text x=\"" << num(px(v)) << "\" y=\"" << num(kTop + plot_h() + 16) << "\" text-anchor=\"middle\">"
           << tick(v) << "</text>\n";
    }
  }
  void y_ticks() {
    for (int i = 0; i <= 4; ++i) {
      const double v = y_.lo + (y_.hi - y_.lo) * i / 4.0;
      out_ << "<line x1=\"" << num(kLeft) << "\" x2=\"" << num(kLeft + plot_w()) << "\" y1=\"" << num(py(v))
           << "\" y2=\"" << num(py(v)) << "\" stroke=\"#ddd\"/>\n";
      out_ << "<text x=\"" << num(kLeft - 6) << "\" y=\"" << num(py(v) + 4) << "\" text-anchor=\"end\">" << tick(v)
           << "</text>\n";
    }
  }

  std::ostringstream& out() { return out_; }
  std::string finish() {
    out_ << "</svg>\n";
    return out_.str();
  }

  static double plot_w() { return kWidth - kLeft - kRight; }
  static double plot_h() { return kHeight - kTop - kBottom; }

 private:
  Range x_, y_;
  std::ostringstream out_;
};

}  // namespace

std::string line_svg(const std::vector<Series>& series, const Axes& axes) {
  Range xr, yr;
  for (const Series& s : series) {
    require(s.x.size() == s.y.size(), "line_svg: x and y lengths differ in series '" + s.name + "'");
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) continue;
      xr.add(s.x[i]);
      yr.add(s.y[i]);
    }
  }
  Canvas c(axes, xr.padded(), yr.padded());
  c.y_ticks();
  c.x_ticks();
  for (std::size_t k = 0; k < series.size(); ++k) {
    const Series& s = series[k];
    const char* color = kPalette[k % std::size(kPalette)];
    std::string points;
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) continue;
      points += num(c.px(s.x[i])) + "," + num(c.py(s.y[i])) + " ";
      c.out() << "<circle cx=\"" << num(c.px(s.x[i])) << "\" cy=\"" << num(c.py(s.y[i])) << "\" r=\"3\" fill=\""
              << color << "\"/>\n";
    }
    c.out() << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"" << points
            << "\"/>\n";
    c.out() << "<text x=\"" << num(kLeft + 10) << "\" y=\"" << num(kTop + 16 + 14.0 * k) << "\" fill=\"" << color
            << "\">" << escape(s.name) << "</text>\n";
  }
  return c.finish();
}

std::string bar_svg(const std::vector<std::string>& labels, const std::vector<double>& values, const Axes& axes) {
  require(labels.size() == values.size(), "bar_svg: labels and values lengths differ");
  Range yr;
  yr.add(0.0);
  for (double v : values) yr.add(v);
  Range y = yr.padded();
  y.lo = std::min(y.lo, 0.0);
  Canvas c(axes, {0.0, std::max<double>(1.0, static_cast<double>(values.size()))}, y);
  c.y_ticks();
  const double slot = Canvas::plot_w() / std::max<std::size_t>(1, values.size());
  const std::size_t label_every = std::max<std::size_t>(1, values.size() / 16);
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double v = std::isfinite(values[i]) ? values[i] : 0.0;
    const double top = c.py(std::max(v, 0.0)), base = c.py(std::min(v, 0.0));
    c.out() << "<rect x=\"" << num(kLeft + slot * i + 0.1 * slot) << "\" y=\"" << num(top) << "\" width=\""
            << num(0.8 * slot) << "\" height=\"" << num(base - top) << "\" fill=\"" << kPalette[0] << "\"/>\n";
    if (i % label_every == 0) {
      c.out() << "<text x=\"" << num(kLeft + slot * (i + 0.5)) << "\" y=\"" << num(kTop + Canvas::plot_h() + 16)
              << "\" text-anchor=\"middle\">" << escape(labels[i]) << "</text>\n";
    }
  }
  return c.finish();
}

std::string scatter_svg(const std::vector<double>& truth, const std::vector<double>& pred, const Axes& axes) {
  require(truth.size() == pred.size(), "scatter_svg: truth and pred lengths differ");
  Range r;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (!std::isfinite(truth[i]) || !std::isfinite(pred[i])) continue;
    r.add(truth[i]);
    r.add(pred[i]);
  }
  const Range p = r.padded();
  Canvas c(axes, p, p);
  c.y_ticks();
  c.x_ticks();
  c.out() << "<line x1=\"" << num(c.px(p.lo)) << "\" y1=\"" << num(c.py(p.lo)) << "\" x2=\"" << num(c.px(p.hi))
          << "\" y2=\"" << num(c.py(p.hi)) << "\" stroke=\"#888\" stroke-dasharray=\"4 3\"/>\n";
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (!std::isfinite(truth[i]) || !std::isfinite(pred[i])) continue;
    c.out() << "<circle cx=\"" << num(c.px(truth[i])) << "\" cy=\"" << num(c.py(pred[i])) << "\" r=\"3.5\" fill=\""
            << kPalette[0] << "\" fill-opacity=\"0.7\"/>\n";
  }
  return c.finish();
}

void write_svg(const std::filesystem::path& path, const std::string& svg) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write " + path.string());
  f << svg;
  if (!f) throw DataError("write failed: " + path.string());
}

}  // namespace lqrppg::plot
