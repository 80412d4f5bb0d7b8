#pragma once

// Training-free reference estimators operating on spatially averaged RGB traces.

#include "lqrppg/clip.hpp"
#include "lqrppg/signal.hpp"

namespace lqrppg {

struct RgbTrace {
  Vec r;
  Vec g;
  Vec b;
  double fs = 30.0;
};

/// Whole-frame spatial mean per channel and frame. Requires 3 channels.
RgbTrace extract_rgb(const ClipTensor& clip);

PulseTrace green_method(const RgbTrace& rgb, const BandConfig& band = kPulseBand);

/// Chrominance method on unit-mean channels: X = 3R - 2G, Y = 1.5R + G - 1.5B,
/// S = Xf - alpha * Yf with alpha = sd(Xf) / sd(Yf).
PulseTrace chrom_method(const RgbTrace& rgb, const BandConfig& band = kPulseBand);

/// alpha for the chrominance combination; 0 when both inputs are flat.
double chrom_alpha(const Vec& xf, const Vec& yf);

/// Plane-orthogonal-to-skin method with 1.6 s sliding windows and overlap-add.
PulseTrace pos_method(const RgbTrace& rgb, const BandConfig& band = kPulseBand);

int pos_window_length(double fs);

}  // namespace lqrppg
