#include "lqrppg/signal.hpp"

#include "lqrppg/errors.hpp"

#include <Eigen/Dense>
#include <unsupported/Eigen/FFT>

#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <limits>
#include <map>
#include <numbers>
#include <vector>

namespace lqrppg {

namespace {

using cd = std::complex<double>;

std::vector<double> poly_from_roots(const std::vector<cd>& roots) {
  std::vector<cd> c{cd(1.0)};
  for (const cd& r : roots) {
    std::vector<cd> next(c.size() + 1, cd(0.0));
    for (std::size_t i = 0; i < c.size(); ++i) {
      next[i] += c[i];
      next[i + 1] -= c[i] * r;
    }
    c = std::move(next);
  }
  std::vector<double> out(c.size());
  for (std::size_t i = 0; i < c.size(); ++i) out[i] = c[i].real();
  return out;
}

Vec hann_periodic(int n) {
  Vec w(n);
  for (int i = 0; i < n; ++i) w[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * i / n);
  return w;
}

Vec hann_symmetric(int n) {
  Vec w(n);
  if (n == 1) {
    w[0] = 1.0;
    return w;
  }
  for (int i = 0; i < n; ++i) w[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * i / (n - 1));
  return w;
}

void require_finite(const Vec& x, const char* what) {
  if (!x.allFinite()) throw InvalidArgument(std::string(what) + ": non-finite samples");
}

}  // namespace

std::string to_string(TraceKind kind) {
  switch (kind) {
    case TraceKind::raw: return "raw";
    case TraceKind::filtered: return "filtered";
    case TraceKind::pseudo: return "pseudo";
    case TraceKind::estimate: return "estimate";
  }
  return "unknown";
}

PulseTrace::PulseTrace(Vec samples, double fs, TraceKind kind, int bits)
    : samples_(std::move(samples)), fs_(fs), kind_(kind), bits_(bits) {
  require(samples_.size() >= 2, "PulseTrace: need at least 2 samples");
  require(fs_ > 0.0 && std::isfinite(fs_), "PulseTrace: fs must be positive");
  require_finite(samples_, "PulseTrace");
}

void BandConfig::validate(double fs) const {
  require(lo > 0.0 && lo < hi, "band: need 0 < lo < hi");
  require(hi < fs / 2.0, "band: hi must be below the Nyquist frequency");
}

Eigen::Index Spectrum::argmax_in(const BandConfig& band) const {
  Eigen::Index best = -1;
  for (Eigen::Index i = 0; i < freqs.size(); ++i) {
    if (freqs[i] < band.lo || freqs[i] > band.hi) continue;
    if (best < 0 || power[i] > power[best]) best = i;
  }
  return best;
}

// ---------------------------------------------------------------------------

IirFilter butterworth_bandpass(int order, const BandConfig& band, double fs) {
  require(order >= 1, "butterworth: order must be >= 1");
  band.validate(fs);
  const double pi = std::numbers::pi;

  // Analog low-pass prototype poles on the unit circle.
  std::vector<cd> proto;
  for (int m = -order + 1; m < order; m += 2) proto.push_back(-std::exp(cd(0.0, pi * m / (2.0 * order))));

  const double wl = 2.0 * fs * std::tan(pi * band.lo / fs);
  const double wh = 2.0 * fs * std::tan(pi * band.hi / fs);
  const double bw = wh - wl;
  const double w0 = std::sqrt(wl * wh);

  std::vector<cd> poles;
  for (const cd& p : proto) {
    const cd plp = p * bw / 2.0;
    const cd root = std::sqrt(plp * plp - w0 * w0);
    poles.push_back(plp + root);
    poles.push_back(plp - root);
  }
  double gain = std::pow(bw, order);

  // Bilinear transform: `order` analog zeros at s = 0 map to z = 1, the
  // remaining `order` at infinity to z = -1.
  const double fs2 = 2.0 * fs;
  std::vector<cd> zpoles;
  cd den(1.0);
  for (const cd& p : poles) {
    zpoles.push_back((fs2 + p) / (fs2 - p));
    den *= (fs2 - p);
  }
  std::vector<cd> zzeros;
  for (int i = 0; i < order; ++i) zzeros.push_back(cd(1.0));
  for (int i = 0; i < order; ++i) zzeros.push_back(cd(-1.0));
  gain = (gain * std::pow(fs2, order) / den).real();

  const auto bnum = poly_from_roots(zzeros);
  const auto aden = poly_from_roots(zpoles);
  IirFilter f;
  f.b = Eigen::Map<const Vec>(bnum.data(), static_cast<Eigen::Index>(bnum.size())) * gain;
  f.a = Eigen::Map<const Vec>(aden.data(), static_cast<Eigen::Index>(aden.size()));
  return f;
}

Vec lfilter(const IirFilter& filter, const Vec& x, Vec* state) {
  const Eigen::Index order = std::max(filter.a.size(), filter.b.size());
  Vec b = Vec::Zero(order), a = Vec::Zero(order);
  b.head(filter.b.size()) = filter.b / filter.a[0];
  a.head(filter.a.size()) = filter.a / filter.a[0];

  Vec z = Vec::Zero(order - 1);
  if (state != nullptr && state->size() == order - 1) z = *state;

  Vec y(x.size());
  for (Eigen::Index n = 0; n < x.size(); ++n) {
    const double xn = x[n];
    const double yn = b[0] * xn + (order > 1 ? z[0] : 0.0);
    for (Eigen::Index i = 0; i + 1 < order - 1; ++i) z[i] = b[i + 1] * xn + z[i + 1] - a[i + 1] * yn;
    if (order > 1) z[order - 2] = b[order - 1] * xn - a[order - 1] * yn;
    y[n] = yn;
  }
  if (state != nullptr) *state = z;
  return y;
}

Vec lfilter_zi(const IirFilter& filter) {
  const Eigen::Index n = std::max(filter.a.size(), filter.b.size());
  Vec b = Vec::Zero(n), a = Vec::Zero(n);
  b.head(filter.b.size()) = filter.b / filter.a[0];
  a.head(filter.a.size()) = filter.a / filter.a[0];
  if (n == 1) return Vec();

  Eigen::MatrixXd companion = Eigen::MatrixXd::Zero(n - 1, n - 1);
  companion.row(0) = -a.tail(n - 1).transpose();
  for (Eigen::Index i = 1; i < n - 1; ++i) companion(i, i - 1) = 1.0;
  const Eigen::MatrixXd iminus = Eigen::MatrixXd::Identity(n - 1, n - 1) - companion.transpose();
  const Vec rhs = b.tail(n - 1) - a.tail(n - 1) * b[0];
  return iminus.partialPivLu().solve(rhs);
}

Vec filtfilt(const IirFilter& filter, const Vec& x) {
  const Eigen::Index n = x.size();
  require(n >= 2, "filtfilt: need at least 2 samples");
  const Eigen::Index padlen =
      std::min<Eigen::Index>(3 * std::max(filter.a.size(), filter.b.size()), n - 1);

  Vec ext(n + 2 * padlen);
  for (Eigen::Index i = 0; i < padlen; ++i) ext[i] = 2.0 * x[0] - x[padlen - i];
  ext.segment(padlen, n) = x;
  for (Eigen::Index i = 0; i < padlen; ++i) ext[padlen + n + i] = 2.0 * x[n - 1] - x[n - 2 - i];

  const Vec zi = lfilter_zi(filter);
  Vec state = zi * ext[0];
  Vec y = lfilter(filter, ext, &state);

  Vec rev = y.reverse();
  state = zi * rev[0];
  y = lfilter(filter, rev, &state).reverse();
  return y.segment(padlen, n);
}

// ---------------------------------------------------------------------------

Vec zscore(const Vec& x) {
  require(x.size() >= 2, "zscore: need at least 2 samples");
  require_finite(x, "zscore");
  const double mean = x.mean();
  const Vec c = x.array() - mean;
  const double sd = std::sqrt(c.squaredNorm() / static_cast<double>(x.size()));
  const double scale = std::max(1.0, x.cwiseAbs().maxCoeff());
  if (!(sd > 1e-12 * scale)) return Vec::Zero(x.size());
  return c / sd;
}

PulseTrace zscore(const PulseTrace& trace) {
  return PulseTrace(zscore(trace.samples()), trace.fs(), trace.kind(), trace.bits());
}

PulseTrace bandpass(const PulseTrace& trace, const BandConfig& band, int order) {
  band.validate(trace.fs());
  const IirFilter f = butterworth_bandpass(order, band, trace.fs());
  const TraceKind kind = trace.kind() == TraceKind::raw ? TraceKind::filtered : trace.kind();
  return PulseTrace(filtfilt(f, trace.samples()), trace.fs(), kind, trace.bits());
}

// ---------------------------------------------------------------------------

int next_pow2(int n) {
  int p = 1;
  while (p < n) p <<= 1;
  return p;
}

Spectrum psd_welch(const Vec& x, double fs, const WelchConfig& cfg) {
  require(x.size() >= 2, "psd_welch: need at least 2 samples");
  require(fs > 0.0, "psd_welch: fs must be positive");
  require_finite(x, "psd_welch");
  const int n = static_cast<int>(x.size());
  int seg = cfg.segment > 0 ? cfg.segment : std::min(n, 256);
  if (seg > n) seg = n;  // single-segment periodogram fallback
  const int nfft = cfg.nfft > 0 ? std::max(cfg.nfft, seg) : next_pow2(4 * seg);
  const int noverlap = static_cast<int>(std::floor(cfg.overlap * seg));
  const int step = std::max(1, seg - noverlap);
  const int nseg = (n - seg) / step + 1;

  const Vec w = hann_periodic(seg);
  const double scale = 1.0 / (fs * w.squaredNorm());
  const int nbins = nfft / 2 + 1;

  Eigen::FFT<double> fft;
  std::vector<double> buf(nfft, 0.0);
  std::vector<cd> spec;
  Vec acc = Vec::Zero(nbins);
  for (int s = 0; s < nseg; ++s) {
    const Vec piece = x.segment(s * step, seg);
    const double mean = piece.mean();
    std::fill(buf.begin(), buf.end(), 0.0);
    for (int i = 0; i < seg; ++i) buf[i] = (piece[i] - mean) * w[i];
    fft.fwd(spec, buf);
    for (int k = 0; k < nbins; ++k) acc[k] += std::norm(spec[k]);
  }
  acc *= scale / nseg;
  // One-sided: fold negative frequencies except DC and (even nfft) Nyquist.
  for (int k = 1; k < nbins; ++k) {
    if (nfft % 2 == 0 && k == nbins - 1) continue;
    acc[k] *= 2.0;
  }

  Spectrum out;
  out.freqs = Vec::LinSpaced(nbins, 0.0, fs * (nbins - 1) / nfft);
  out.power = acc;
  return out;
}

Spectrum psd_welch(const PulseTrace& trace, const WelchConfig& cfg) {
  return psd_welch(trace.samples(), trace.fs(), cfg);
}

double hr_from_trace(const PulseTrace& trace, const BandConfig& band, const HrConfig& cfg) {
  require(trace.size() >= 160, "hr_from_trace: need at least 160 samples");
  band.validate(trace.fs());
  Vec x = trace.samples();
  if (cfg.prefilter) x = filtfilt(butterworth_bandpass(cfg.filter_order, band, trace.fs()), x);
  const Spectrum s = psd_welch(x, trace.fs(), cfg.welch);
  const Eigen::Index k = s.argmax_in(band);
  const double mean_sq = trace.samples().squaredNorm() / static_cast<double>(trace.size());
  if (k < 0 || !(s.power[k] > 0.0) || s.power[k] <= 1e-12 * mean_sq)
    throw NumericalError("hr_from_trace: no dominant peak");
  return 60.0 * s.freqs[k];
}

double snr_db(const PulseTrace& trace, const BandConfig& band) {
  band.validate(trace.fs());
  const Spectrum s = psd_welch(zscore(trace.samples()), trace.fs());
  double in = 0.0, out = 0.0;
  for (Eigen::Index i = 0; i < s.freqs.size(); ++i) {
    if (s.freqs[i] >= band.lo && s.freqs[i] <= band.hi)
      in += s.power[i];
    else
      out += s.power[i];
  }
  if (out == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(in / out);
}

// ---------------------------------------------------------------------------

double pearson(const Vec& a, const Vec& b) { return 1.0 - neg_pearson(a, b); }

double neg_pearson(const Vec& a, const Vec& b) { return neg_pearson_grad(a, b).value; }

NegPearsonGrad neg_pearson_grad(const Vec& a, const Vec& b) {
  require(a.size() == b.size(), "neg_pearson: length mismatch");
  require(a.size() >= 2, "neg_pearson: need at least 2 samples");
  const Vec ac = a.array() - a.mean();
  const Vec bc = b.array() - b.mean();
  const double na = ac.norm(), nb = bc.norm();
  const double sa = std::max(1.0, a.cwiseAbs().maxCoeff());
  const double sb = std::max(1.0, b.cwiseAbs().maxCoeff());
  if (!(na > 1e-12 * sa) || !(nb > 1e-12 * sb)) throw InvalidArgument("neg_pearson: zero-variance argument");
  const double rho = ac.dot(bc) / (na * nb);
  NegPearsonGrad g;
  g.value = 1.0 - rho;
  g.grad_a = -(bc / (na * nb) - rho * ac / (na * na));
  g.grad_b = -(ac / (na * nb) - rho * bc / (nb * nb));
  return g;
}

int fine_nfft(int n) { return next_pow2(4 * n); }

BandBins band_bins(int n, double fs, const BandConfig& band, int nfft) {
  band.validate(fs);
  BandBins bins;
  bins.n = n;
  bins.nfft = nfft > 0 ? nfft : n;
  require(bins.nfft >= n, "band_bins: nfft shorter than the signal");
  bins.first = static_cast<int>(std::ceil(band.lo * bins.nfft / fs - 1e-9));
  bins.last = static_cast<int>(std::floor(band.hi * bins.nfft / fs + 1e-9));
  if (bins.count() < 3) throw InvalidArgument("spectral_ce: fewer than 3 in-band bins (increase T or nfft)");
  return bins;
}

namespace {

// Windowed DFT rows (Hann * cos, Hann * sin) for a bin range, cached per thread.
struct DftRows {
  Eigen::MatrixXd cos;
  Eigen::MatrixXd sin;
};

const DftRows& dft_rows(const BandBins& bins) {
  thread_local std::map<std::array<int, 4>, DftRows> cache;
  const std::array<int, 4> key{bins.n, bins.nfft, bins.first, bins.last};
  auto it = cache.find(key);
  if (it != cache.end()) return it->second;
  const int k = bins.count();
  const int n = bins.n;
  const Vec w = hann_symmetric(n);
  DftRows r{Eigen::MatrixXd(k, n), Eigen::MatrixXd(k, n)};
  for (int j = 0; j < k; ++j) {
    const double omega = 2.0 * std::numbers::pi * (bins.first + j) / bins.nfft;
    for (int t = 0; t < n; ++t) {
      r.cos(j, t) = w[t] * std::cos(omega * t);
      r.sin(j, t) = w[t] * std::sin(omega * t);
    }
  }
  return cache.emplace(key, std::move(r)).first->second;
}

}  // namespace

Vec band_periodogram(const Vec& x, const BandBins& bins) {
  require(x.size() == bins.n, "band_periodogram: length mismatch");
  const DftRows& d = dft_rows(bins);
  return (d.cos * x).array().square() + (d.sin * x).array().square();
}

int spectral_target_bin(const Vec& target, const BandBins& bins) {
  require_finite(target, "spectral_target_bin");
  Eigen::Index j = 0;
  band_periodogram(target, bins).maxCoeff(&j);
  return bins.first + static_cast<int>(j);
}

SpectralCeGrad spectral_ce_grad(const Vec& pred, int target_bin, const BandBins& bins) {
  require(pred.size() == bins.n, "spectral_ce: length mismatch");
  require(target_bin >= bins.first && target_bin <= bins.last, "spectral_ce: target bin outside band");
  require_finite(pred, "spectral_ce");
  const DftRows& d = dft_rows(bins);
  const Eigen::MatrixXd& cosm = d.cos;
  const Eigen::MatrixXd& sinm = d.sin;
  const Vec re = cosm * pred;
  const Vec im = -(sinm * pred);
  const Vec power = re.array().square() + im.array().square();
  const double total = power.sum() + 1e-30;
  const Vec p = power / total;

  const double pmax = p.maxCoeff();
  const Vec e = (p.array() - pmax).exp();
  const double z = e.sum();
  const Vec soft = e / z;
  const int cls = target_bin - bins.first;

  SpectralCeGrad out;
  out.value = -(p[cls] - pmax) + std::log(z);

  Vec g = soft;
  g[cls] -= 1.0;
  // Through p = P / sum(P).
  const Vec dpower = (g.array() - g.dot(p)) / total;
  // Through P_j = re_j^2 + im_j^2.
  const Vec dre = 2.0 * dpower.cwiseProduct(re);
  const Vec dim = 2.0 * dpower.cwiseProduct(im);
  out.grad = cosm.transpose() * dre - sinm.transpose() * dim;
  return out;
}

double spectral_ce(const Vec& pred, const Vec& target, double fs, const BandConfig& band, int nfft) {
  require(pred.size() == target.size(), "spectral_ce: length mismatch");
  require(pred.size() >= 64, "spectral_ce: need at least 64 samples");
  const BandBins bins = band_bins(static_cast<int>(pred.size()), fs, band, nfft);
  return spectral_ce_grad(pred, spectral_target_bin(target, bins), bins).value;
}

// ---------------------------------------------------------------------------

Vec resample_linear(const Vec& x, double fs_in, double fs_out) {
  require(x.size() >= 2, "resample: need at least 2 samples");
  require(fs_in > 0.0 && fs_out > 0.0, "resample: rates must be positive");
  if (fs_in == fs_out) return x;
  const double duration = static_cast<double>(x.size() - 1) / fs_in;
  const auto m = static_cast<Eigen::Index>(std::floor(duration * fs_out + 1e-9)) + 1;
  Vec y(m);
  for (Eigen::Index j = 0; j < m; ++j) {
    const double pos = static_cast<double>(j) * fs_in / fs_out;
    const auto i0 = std::min<Eigen::Index>(static_cast<Eigen::Index>(std::floor(pos)), x.size() - 2);
    const double frac = pos - static_cast<double>(i0);
    y[j] = (1.0 - frac) * x[i0] + frac * x[i0 + 1];
  }
  return y;
}

Vec moving_average(const Vec& x, int window) {
  require(window >= 1, "moving_average: window must be >= 1");
  const Eigen::Index n = x.size();
  const Eigen::Index half = window / 2;
  Vec y(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const Eigen::Index lo = std::max<Eigen::Index>(0, i - half);
    const Eigen::Index hi = std::min<Eigen::Index>(n - 1, i + half);
    y[i] = x.segment(lo, hi - lo + 1).mean();
  }
  return y;
}

}  // namespace lqrppg
