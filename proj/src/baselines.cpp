#include "lqrppg/baselines.hpp"

#include "lqrppg/errors.hpp"

#include <cmath>

namespace lqrppg {

namespace {

double population_sd(const Vec& x) {
  const Vec c = x.array() - x.mean();
  return std::sqrt(c.squaredNorm() / static_cast<double>(x.size()));
}

Vec unit_mean(const Vec& x, const char* who) {
  const double m = x.mean();
  if (!(std::abs(m) > 0.0)) throw InvalidArgument(std::string(who) + ": zero channel mean");
  return x / m;
}

void check_rgb(const RgbTrace& rgb) {
  require(rgb.r.size() == rgb.g.size() && rgb.g.size() == rgb.b.size(), "rgb trace: unequal channel lengths");
  require(rgb.fs > 0.0, "rgb trace: fs must be positive");
  require(rgb.g.size() >= 2, "rgb trace: need at least 2 frames");
}

PulseTrace finish(const Vec& s, double fs, const BandConfig& band) {
  const PulseTrace filtered = bandpass(PulseTrace(s, fs, TraceKind::raw), band);
  return PulseTrace(zscore(filtered.samples()), fs, TraceKind::estimate);
}

}  // namespace

RgbTrace extract_rgb(const ClipTensor& clip) {
  require(clip.channels == 3, "extract_rgb: clip must have 3 channels");
  RgbTrace rgb;
  rgb.fs = clip.fs;
  Vec* out[3] = {&rgb.r, &rgb.g, &rgb.b};
  for (int c = 0; c < 3; ++c) {
    out[c]->resize(clip.frames);
    for (int t = 0; t < clip.frames; ++t) (*out[c])[t] = clip.frame(c, t).cast<double>().mean();
  }
  return rgb;
}

PulseTrace green_method(const RgbTrace& rgb, const BandConfig& band) {
  check_rgb(rgb);
  return finish(rgb.g, rgb.fs, band);
}

double chrom_alpha(const Vec& xf, const Vec& yf) {
  const double sx = population_sd(xf);
  const double sy = population_sd(yf);
  if (!(sy > 1e-12)) return 0.0;
  return sx / sy;
}

PulseTrace chrom_method(const RgbTrace& rgb, const BandConfig& band) {
  check_rgb(rgb);
  band.validate(rgb.fs);
  const Vec rn = unit_mean(rgb.r, "chrom");
  const Vec gn = unit_mean(rgb.g, "chrom");
  const Vec bn = unit_mean(rgb.b, "chrom");
  const Vec x = 3.0 * rn - 2.0 * gn;
  const Vec y = 1.5 * rn + gn - 1.5 * bn;

  const IirFilter f = butterworth_bandpass(2, band, rgb.fs);
  const Vec xf = filtfilt(f, x);
  const Vec yf = filtfilt(f, y);
  Vec s = xf - chrom_alpha(xf, yf) * yf;
  // Pulse that cancels in chrominance leaves rounding residue only.
  if (!(population_sd(s) > 1e-10 * (1.0 + population_sd(xf) + population_sd(yf)))) s.setZero();
  return finish(s, rgb.fs, band);
}

int pos_window_length(double fs) { return static_cast<int>(std::lround(1.6 * fs)); }

PulseTrace pos_method(const RgbTrace& rgb, const BandConfig& band) {
  check_rgb(rgb);
  band.validate(rgb.fs);
  const Eigen::Index n = rgb.g.size();
  const int l = pos_window_length(rgb.fs);
  require(l >= 2 && l <= n, "pos: trace shorter than one 1.6 s window");

  Vec h = Vec::Zero(n);
  for (Eigen::Index start = 0; start + l <= n; ++start) {
    const Vec r = unit_mean(rgb.r.segment(start, l), "pos");
    const Vec g = unit_mean(rgb.g.segment(start, l), "pos");
    const Vec b = unit_mean(rgb.b.segment(start, l), "pos");
    const Vec s1 = g - b;
    const Vec s2 = g + b - 2.0 * r;
    const double sd2 = population_sd(s2);
    Vec hw = s1;
    if (sd2 > 1e-12) hw += (population_sd(s1) / sd2) * s2;
    h.segment(start, l) += (hw.array() - hw.mean()).matrix();
  }
  return finish(h, rgb.fs, band);
}

}  // namespace lqrppg
