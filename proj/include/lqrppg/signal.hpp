#pragma once

// Deterministic pulse-signal substrate: normalization, zero-phase band-pass,
// Welch spectra, heart-rate extraction, SNR, and the two reconstruction-loss
// ingredients (negative Pearson, spectral cross-entropy) with their gradients.

#include <Eigen/Core>

#include <string>

namespace lqrppg {

using Vec = Eigen::VectorXd;

enum class TraceKind { raw, filtered, pseudo, estimate };

std::string to_string(TraceKind kind);

/// A finite real time series with its sampling rate.
///
/// Construction rejects T < 2, fs <= 0 and any non-finite sample, so every
/// PulseTrace in flight satisfies those invariants.
class PulseTrace {
 public:
  PulseTrace(Vec samples, double fs, TraceKind kind = TraceKind::raw, int bits = 0);

  const Vec& samples() const { return samples_; }
  double fs() const { return fs_; }
  TraceKind kind() const { return kind_; }
  /// Bit depth for pseudo labels, 0 otherwise.
  int bits() const { return bits_; }
  Eigen::Index size() const { return samples_.size(); }

 private:
  Vec samples_;
  double fs_;
  TraceKind kind_;
  int bits_;
};

struct BandConfig {
  double lo;
  double hi;

  /// Throws InvalidArgument unless 0 < lo < hi < fs/2.
  void validate(double fs) const;
};

/// Loss / evaluation band.
inline constexpr BandConfig kPulseBand{0.75, 2.5};
/// Label-quality SNR band. Deliberately distinct from kPulseBand.
inline constexpr BandConfig kSnrBand{0.7, 2.5};

struct Spectrum {
  Vec freqs;  // Hz, strictly increasing
  Vec power;  // non-negative

  /// Index of the largest power among bins with lo <= f <= hi; -1 if none.
  Eigen::Index argmax_in(const BandConfig& band) const;
};

// ---------------------------------------------------------------------------
// Filtering

/// Transfer-function coefficients, a[0] == 1.
struct IirFilter {
  Vec b;
  Vec a;
};

/// Digital Butterworth band-pass of the given prototype order (the resulting
/// filter has 2*order poles), designed by bilinear transform with prewarping.
IirFilter butterworth_bandpass(int order, const BandConfig& band, double fs);

/// Direct-form II transposed filtering. `state` (length max(len a, len b) - 1)
/// is used as the initial condition when non-null and holds the final state on
/// return.
Vec lfilter(const IirFilter& filter, const Vec& x, Vec* state = nullptr);

/// Steady-state initial condition for a unit step input.
Vec lfilter_zi(const IirFilter& filter);

/// Zero-phase forward-backward filtering with odd-reflection padding of
/// 3*max(len a, len b) samples (clamped to T-1 for short inputs).
Vec filtfilt(const IirFilter& filter, const Vec& x);

// ---------------------------------------------------------------------------
// Normalization and filtering of traces

/// Population z-score. Inputs whose spread is below 1e-12 of their magnitude
/// map to all zeros.
Vec zscore(const Vec& x);
PulseTrace zscore(const PulseTrace& trace);

PulseTrace bandpass(const PulseTrace& trace, const BandConfig& band = kPulseBand, int order = 2);

// ---------------------------------------------------------------------------
// Spectra

struct WelchConfig {
  int segment = 0;       // 0: min(T, 256)
  double overlap = 0.5;  // fraction of segment
  int nfft = 0;          // 0: next power of two >= 4 * segment
};

/// One-sided Welch PSD (periodic Hann window, constant detrend per segment,
/// density scaling). A segment longer than the input degrades to a single
/// periodogram over the whole input.
Spectrum psd_welch(const Vec& x, double fs, const WelchConfig& cfg = {});
Spectrum psd_welch(const PulseTrace& trace, const WelchConfig& cfg = {});

struct HrConfig {
  bool prefilter = true;  // band-pass before the spectrum, as in evaluation post-processing
  int filter_order = 2;
  WelchConfig welch;
};

/// Heart rate (bpm) at the dominant in-band Welch peak. Throws NumericalError
/// ("no dominant peak") when the in-band spectrum carries no energy.
double hr_from_trace(const PulseTrace& trace, const BandConfig& band = kPulseBand,
                     const HrConfig& cfg = {});

/// In-band over out-of-band Welch power of the z-scored trace, in dB.
/// Returns +inf when the out-of-band power is exactly zero.
double snr_db(const PulseTrace& trace, const BandConfig& band = kSnrBand);

// ---------------------------------------------------------------------------
// Loss ingredients

double pearson(const Vec& a, const Vec& b);

/// 1 - rho(a, b). Throws InvalidArgument on length mismatch or zero variance.
double neg_pearson(const Vec& a, const Vec& b);

struct NegPearsonGrad {
  double value;
  Vec grad_a;
  Vec grad_b;
};
NegPearsonGrad neg_pearson_grad(const Vec& a, const Vec& b);

/// Absolute DFT bin range [first, last] inside a band for an nfft-point
/// transform of a length-n signal.
struct BandBins {
  int n = 0;
  int nfft = 0;
  int first = 0;
  int last = -1;
  int count() const { return last - first + 1; }
};

/// Zero-padded transform length used by the training losses: the Welch
/// default for a single segment, next power of two >= 4n.
int fine_nfft(int n);

/// nfft = 0 selects a full-length transform (nfft = n).
BandBins band_bins(int n, double fs, const BandConfig& band, int nfft = 0);

/// Hann-windowed periodogram |DFT_k(w*x)|^2 for the bins of `bins`.
Vec band_periodogram(const Vec& x, const BandBins& bins);

/// Absolute bin index of the dominant in-band periodogram peak of `target`.
int spectral_target_bin(const Vec& target, const BandBins& bins);

struct SpectralCeGrad {
  double value;
  Vec grad;  // d value / d pred
};

/// Cross-entropy between softmax(normalized in-band periodogram of pred) and
/// the one-hot class `target_bin` (absolute index within `bins`).
SpectralCeGrad spectral_ce_grad(const Vec& pred, int target_bin, const BandBins& bins);

double spectral_ce(const Vec& pred, const Vec& target, double fs, const BandConfig& band = kPulseBand,
                   int nfft = 0);

// ---------------------------------------------------------------------------
// Small utilities shared across modules

/// Linear interpolation from fs_in to fs_out over the same time span.
Vec resample_linear(const Vec& x, double fs_in, double fs_out);

/// Centered moving average; windows shrink at the edges.
Vec moving_average(const Vec& x, int window);

int next_pow2(int n);

}  // namespace lqrppg
