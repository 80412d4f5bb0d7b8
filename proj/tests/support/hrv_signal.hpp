#pragma once

// Pulse waveforms with a prescribed beat-interval modulation.

#include "lqrppg/signal.hpp"

#include <cmath>
#include <numbers>

namespace lqrppg::testing {

/// sin of the integrated instantaneous rate f(t) = rate_hz * (1 + depth * sin(2 pi mod_hz t)).
/// depth = 0 gives a metronomic pulse.
inline Vec modulated_pulse(double seconds, double fs, double rate_hz, double mod_hz, double depth) {
  const auto n = static_cast<Eigen::Index>(std::lround(seconds * fs));
  Vec y(n);
  double phase = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double t = static_cast<double>(i) / fs;
    y[i] = std::sin(phase);
    phase += 2.0 * std::numbers::pi * rate_hz * (1.0 + depth * std::sin(2.0 * std::numbers::pi * mod_hz * t)) / fs;
  }
  return y;
}

}  // namespace lqrppg::testing
