#pragma once

// Minimal SVG charts for reports: line series, bars and a scatter with the
// identity line. Output is deterministic text (fixed precision, no timestamps).

#include <filesystem>
#include <string>
#include <vector>

namespace lqrppg::plot {

struct Series {
  std::string name;
  std::vector<double> x;
  std::vector<double> y;
};

struct Axes {
  std::string title;
  std::string x_label;
  std::string y_label;
};

/// One polyline with markers per series. Non-finite points are skipped.
std::string line_svg(const std::vector<Series>& series, const Axes& axes);

/// Vertical bars, one per value, labelled by `labels` (same length).
std::string bar_svg(const std::vector<std::string>& labels, const std::vector<double>& values, const Axes& axes);

/// Points (x = truth, y = prediction) with the y = x reference line.
std::string scatter_svg(const std::vector<double>& truth, const std::vector<double>& pred, const Axes& axes);

void write_svg(const std::filesystem::path& path, const std::string& svg);

}  // namespace lqrppg::plot
