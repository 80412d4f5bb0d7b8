#pragma once

// Scalar codebooks: nearest-code assignment, EMA refinement, the uniform
// (non-learnable) counterpart, and utilization / fidelity statistics.

#include "lqrppg/signal.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace lqrppg {

struct Codebook {
  int bits = 1;
  Vec codes;       // 2^bits entries
  Vec ema_count;   // running assignment counts
  Vec ema_sum;     // running sums of assigned latents
  double decay = 0.99;
  double eps = 1e-5;

  int size() const { return static_cast<int>(codes.size()); }

  /// Codes at evenly spaced quantiles (k + 0.5) / 2^bits of `samples`.
  static Codebook from_quantiles(int bits, const Vec& samples, double decay = 0.99, double eps = 1e-5);
  static Codebook from_codes(int bits, const Vec& codes, double decay = 0.99, double eps = 1e-5);

  /// Throws InvalidArgument when the invariants do not hold.
  void validate() const;
};

/// Indices are 0-based (code k of a 2^n book is index k-1 in 1-based notation).
struct Assignment {
  std::vector<int> indices;
  Vec quantized;
};

/// Nearest code by absolute distance; ties go to the smaller index.
Assignment assign_codes(const Vec& z, const Vec& codes);
Assignment assign_codes(const Vec& z, const Codebook& cb);

/// One EMA step with Laplace-smoothed counts:
///   count_k <- g*count_k + (1-g)*n_k,  sum_k <- g*sum_k + (1-g)*sum_{i(t)=k} z_t,
///   code_k  <- sum_k / ((count_k + eps) / (N + K*eps) * N),  N = sum_k count_k.
/// A code whose running count is exactly zero keeps its value.
void ema_update(Codebook& cb, const Vec& z, const Assignment& assignment);

/// Bin centers of 2^bits equal-width bins over [lo, hi].
Vec uniform_codes(int bits, double lo = -3.0, double hi = 3.0);

/// Bin membership after clamping to [lo, hi]; interior bin edges belong to
/// the lower bin so that the result matches assign_codes on uniform_codes.
Assignment uniform_quantize(const Vec& y, int bits, double lo = -3.0, double hi = 3.0);

/// Fraction of timesteps on each code across a batch of assignments.
Vec utilization(const std::vector<Assignment>& batch, int codebook_size);

/// Mean |HR(pseudo_i) - HR(truth_i)| in bpm.
double label_fidelity_mae(const std::vector<PulseTrace>& pseudo, const std::vector<PulseTrace>& truth,
                          const BandConfig& band = kPulseBand);

// Checkpoint: <stem>.bin holds little-endian float64 codes, counts, sums;
// <stem>.json holds {bits, decay, eps, version}.
void save_codebook(const Codebook& cb, const std::filesystem::path& stem);
Codebook load_codebook(const std::filesystem::path& stem);

/// Git-style SHA-1 of the codebook's serialized codes.
std::string codebook_hash(const Codebook& cb);

}  // namespace lqrppg
