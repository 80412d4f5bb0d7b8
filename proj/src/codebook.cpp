#include "lqrppg/codebook.hpp"

#include "lqrppg/errors.hpp"
#include "lqrppg/io.hpp"

#include <algorithm>
#include <cmath>

namespace lqrppg {

namespace {
constexpr int kCodebookFormatVersion = 1;
}

Codebook Codebook::from_codes(int bits, const Vec& codes, double decay, double eps) {
  Codebook cb;
  cb.bits = bits;
  cb.codes = codes;
  cb.ema_count = Vec::Ones(codes.size());
  cb.ema_sum = codes;
  cb.decay = decay;
  cb.eps = eps;
  cb.validate();
  return cb;
}

Codebook Codebook::from_quantiles(int bits, const Vec& samples, double decay, double eps) {
  require(bits >= 1 && bits <= 15, "codebook: bits must be in 1..15");
  require(samples.size() >= 1, "codebook: need samples for quantile init");
  require(samples.allFinite(), "codebook: non-finite samples");
  std::vector<double> sorted(samples.data(), samples.data() + samples.size());
  std::sort(sorted.begin(), sorted.end());
  const int k = 1 << bits;
  Vec codes(k);
  for (int i = 0; i < k; ++i) {
    const double q = (i + 0.5) / k;
    const auto idx = std::min<std::size_t>(sorted.size() - 1, static_cast<std::size_t>(q * sorted.size()));
    codes[i] = sorted[idx];
  }
  return from_codes(bits, codes, decay, eps);
}

void Codebook::validate() const {
  require(bits >= 1 && bits <= 15, "codebook: bits must be in 1..15");
  require(codes.size() == (1 << bits), "codebook: need 2^bits codes");
  require(ema_count.size() == codes.size() && ema_sum.size() == codes.size(), "codebook: EMA state size mismatch");
  require(codes.allFinite(), "codebook: non-finite codes");
  require((ema_count.array() >= 0.0).all(), "codebook: negative EMA counts");
  require(decay >= 0.0 && decay < 1.0, "codebook: decay must be in [0, 1)");
  require(eps > 0.0, "codebook: eps must be positive");
}

Assignment assign_codes(const Vec& z, const Vec& codes) {
  require(codes.size() >= 1, "assign_codes: empty codebook");
  if (!z.allFinite()) throw InvalidArgument("assign_codes: non-finite latent");
  Assignment a;
  a.indices.resize(z.size());
  a.quantized.resize(z.size());
  for (Eigen::Index t = 0; t < z.size(); ++t) {
    int best = 0;
    double best_d = std::abs(z[t] - codes[0]);
    for (Eigen::Index k = 1; k < codes.size(); ++k) {
      const double d = std::abs(z[t] - codes[k]);
      if (d < best_d) {
        best_d = d;
        best = static_cast<int>(k);
      }
    }
    a.indices[t] = best;
    a.quantized[t] = codes[best];
  }
  return a;
}

Assignment assign_codes(const Vec& z, const Codebook& cb) { return assign_codes(z, cb.codes); }

void ema_update(Codebook& cb, const Vec& z, const Assignment& assignment) {
  require(static_cast<Eigen::Index>(assignment.indices.size()) == z.size(), "ema_update: assignment/latent mismatch");
  require(z.allFinite(), "ema_update: non-finite latent");
  const int k = cb.size();
  Vec counts = Vec::Zero(k), sums = Vec::Zero(k);
  for (Eigen::Index t = 0; t < z.size(); ++t) {
    const int i = assignment.indices[t];
    require(i >= 0 && i < k, "ema_update: index out of range");
    counts[i] += 1.0;
    sums[i] += z[t];
  }
  const double g = cb.decay;
  cb.ema_count = g * cb.ema_count + (1.0 - g) * counts;
  cb.ema_sum = g * cb.ema_sum + (1.0 - g) * sums;

  const double total = cb.ema_count.sum();
  for (int i = 0; i < k; ++i) {
    if (cb.ema_count[i] == 0.0) continue;
    const double smoothed = (cb.ema_count[i] + cb.eps) / (total + k * cb.eps) * total;
    cb.codes[i] = cb.ema_sum[i] / smoothed;
  }
}

Vec uniform_codes(int bits, double lo, double hi) {
  require(bits >= 1, "uniform_quantize: bits must be >= 1");
  require(lo < hi, "uniform_quantize: need lo < hi");
  const int k = 1 << bits;
  const double w = (hi - lo) / k;
  Vec c(k);
  for (int i = 0; i < k; ++i) c[i] = lo + (i + 0.5) * w;
  return c;
}

Assignment uniform_quantize(const Vec& y, int bits, double lo, double hi) {
  const Vec codes = uniform_codes(bits, lo, hi);
  if (!y.allFinite()) throw InvalidArgument("uniform_quantize: non-finite input");
  const int k = 1 << bits;
  const double w = (hi - lo) / k;
  Assignment a;
  a.indices.resize(y.size());
  a.quantized.resize(y.size());
  for (Eigen::Index t = 0; t < y.size(); ++t) {
    const double v = std::clamp(y[t], lo, hi);
    const int idx = std::clamp(static_cast<int>(std::ceil((v - lo) / w)) - 1, 0, k - 1);
    a.indices[t] = idx;
    a.quantized[t] = codes[idx];
  }
  return a;
}

Vec utilization(const std::vector<Assignment>& batch, int codebook_size) {
  require(!batch.empty(), "utilization: empty batch");
  require(codebook_size >= 1, "utilization: empty codebook");
  Vec counts = Vec::Zero(codebook_size);
  double total = 0.0;
  for (const Assignment& a : batch) {
    for (int i : a.indices) {
      require(i >= 0 && i < codebook_size, "utilization: index out of range");
      counts[i] += 1.0;
      total += 1.0;
    }
  }
  require(total > 0.0, "utilization: batch has no timesteps");
  return counts / total;
}

double label_fidelity_mae(const std::vector<PulseTrace>& pseudo, const std::vector<PulseTrace>& truth,
                          const BandConfig& band) {
  require(pseudo.size() == truth.size(), "label_fidelity_mae: unpaired sets");
  require(!pseudo.empty(), "label_fidelity_mae: empty sets");
  double sum = 0.0;
  for (std::size_t i = 0; i < pseudo.size(); ++i)
    sum += std::abs(hr_from_trace(pseudo[i], band) - hr_from_trace(truth[i], band));
  return sum / static_cast<double>(pseudo.size());
}

void save_codebook(const Codebook& cb, const std::filesystem::path& stem) {
  cb.validate();
  const int k = cb.size();
  std::vector<double> payload(3 * k);
  for (int i = 0; i < k; ++i) {
    payload[i] = cb.codes[i];
    payload[k + i] = cb.ema_count[i];
    payload[2 * k + i] = cb.ema_sum[i];
  }
  io::write_f64(std::filesystem::path(stem.string() + ".bin"), payload);
  io::write_json(std::filesystem::path(stem.string() + ".json"),
                 {{"bits", cb.bits}, {"decay", cb.decay}, {"eps", cb.eps}, {"version", kCodebookFormatVersion}});
}

Codebook load_codebook(const std::filesystem::path& stem) {
  const std::filesystem::path meta_path(stem.string() + ".json");
  const io::json meta = io::read_json(meta_path);
  if (!meta.contains("version") || meta["version"] != kCodebookFormatVersion)
    throw DataError("codebook version mismatch in " + meta_path.string());
  Codebook cb;
  try {
    cb.bits = meta.at("bits").get<int>();
    cb.decay = meta.at("decay").get<double>();
    cb.eps = meta.at("eps").get<double>();
  } catch (const io::json::exception& e) {
    throw DataError("corrupt codebook manifest " + meta_path.string() + ": " + e.what());
  }
  if (cb.bits < 1 || cb.bits > 15) throw DataError("corrupt codebook manifest " + meta_path.string());
  const int k = 1 << cb.bits;
  const auto payload = io::read_f64(std::filesystem::path(stem.string() + ".bin"), 3 * static_cast<std::size_t>(k));
  cb.codes = Eigen::Map<const Vec>(payload.data(), k);
  cb.ema_count = Eigen::Map<const Vec>(payload.data() + k, k);
  cb.ema_sum = Eigen::Map<const Vec>(payload.data() + 2 * k, k);
  try {
    cb.validate();
  } catch (const InvalidArgument& e) {
    throw DataError("invalid codebook " + stem.string() + ": " + e.what());
  }
  return cb;
}

std::string codebook_hash(const Codebook& cb) {
  const auto* p = reinterpret_cast<const char*>(cb.codes.data());
  return io::git_blob_sha1(std::span<const char>(p, static_cast<std::size_t>(cb.codes.size()) * sizeof(double)));
}

}  // namespace lqrppg
