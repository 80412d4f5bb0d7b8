#pragma once

// Differentiable building blocks over a named parameter store.
//
// Blocks are stateless descriptors (config + name prefix). Their parameters
// live in a ParamStore under "<prefix>.<field>", so one descriptor drives a
// float store for training and a double copy of the same store for
// finite-difference checks.

#include "lqrppg/autodiff.hpp"
#include "lqrppg/io.hpp"
#include "lqrppg/rng.hpp"

#include <filesystem>
#include <memory>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

namespace lqrppg {

/// Insertion-ordered named parameters with stable addresses.
template <class S>
class ParamStore {
 public:
  ParamStore() = default;
  ParamStore(ParamStore&&) noexcept = default;
  ParamStore& operator=(ParamStore&&) noexcept = default;
  ParamStore(const ParamStore&) = delete;
  ParamStore& operator=(const ParamStore&) = delete;

  ad::Parameter<S>& add(const std::string& name, ad::Mat<S> value);
  ad::Parameter<S>& get(const std::string& name);
  const ad::Parameter<S>& get(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  std::size_t size() const { return params_.size(); }
  ad::Parameter<S>& at(std::size_t i) { return *params_[i]; }
  const ad::Parameter<S>& at(std::size_t i) const { return *params_[i]; }

  /// Sets every gradient slot to zeros of the value's shape.
  void zero_grad();

  /// Deep copy converted to another scalar type (gradients zeroed).
  template <class T>
  ParamStore<T> cast() const {
    ParamStore<T> out;
    for (const auto& p : params_) out.add(p->name, p->value.template cast<T>());
    return out;
  }

 private:
  std::vector<std::unique_ptr<ad::Parameter<S>>> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Total scalar parameter count.
template <class S>
std::size_t param_count(const ParamStore<S>& store);

/// Leaf for a stored parameter on `tape`.
template <class S>
ad::Var<S> use(ad::Tape<S>& tape, ParamStore<S>& store, const std::string& name) {
  return tape.param(store.get(name));
}

// ---------------------------------------------------------------------------
// Initializers (values drawn in double, then cast, so float and double stores
// built from the same seed agree up to rounding)

/// U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
Eigen::MatrixXd fan_in_uniform(Eigen::Index rows, Eigen::Index cols, double fan_in, Rng& rng);
Eigen::MatrixXd gaussian(Eigen::Index rows, Eigen::Index cols, double sd, Rng& rng);

// ---------------------------------------------------------------------------
// Linear: y = x W (+ b), W in x out.

struct Linear {
  std::string prefix;
  int in = 1;
  int out = 1;
  bool bias = true;

  template <class S> void init(ParamStore<S>& store, Rng& rng) const;
  template <class S> ad::Var<S> forward(ad::Tape<S>& tape, ParamStore<S>& store, const ad::Var<S>& x) const;
};

// ---------------------------------------------------------------------------
// 1D convolution over time (T x Cin -> T x Cout).

struct Conv1d {
  std::string prefix;
  int in = 1;
  int out = 1;
  int kernel = 3;
  int dilation = 1;
  ad::Padding padding = ad::Padding::same;

  template <class S> void init(ParamStore<S>& store, Rng& rng) const;
  template <class S> ad::Var<S> forward(ad::Tape<S>& tape, ParamStore<S>& store, const ad::Var<S>& x) const;
};

// ---------------------------------------------------------------------------
// Dilated conv block: `layers` same-length convs 1 -> hidden -> ... -> 1,
// GELU after every layer but the last.

struct DilatedBlockCfg {
  int layers = 5;
  int kernel = 5;
  std::vector<int> dilations{1, 2, 4, 8, 16};
  int hidden = 8;

  /// 1 + sum (kernel - 1) * dilation.
  int receptive_field() const;
  void validate() const;
};

enum class DilatedInit {
  fan_in,    // centered uniform fan-in scaling
  identity,  // exact pass-through (see init())
  zero,
};

struct DilatedConvBlock {
  std::string prefix;
  DilatedBlockCfg cfg;

  Conv1d layer(int i) const;

  /// `identity` puts a +/- channel pair on the center taps: layer 1 emits
  /// (x, -x), middle layers map (a, b) -> (a - b, b - a) and the last layer
  /// emits a - b. Since GELU(x) - GELU(-x) = x the block reproduces its input.
  /// `perturb` adds that multiple of a fan-in uniform draw to every weight.
  template <class S>
  void init(ParamStore<S>& store, Rng& rng, DilatedInit mode = DilatedInit::fan_in, double perturb = 0.0) const;
  template <class S> ad::Var<S> forward(ad::Tape<S>& tape, ParamStore<S>& store, const ad::Var<S>& x) const;
};

// ---------------------------------------------------------------------------
// Bidirectional selective state-space block.
//
// Per direction: x -> (in_x, in_z) : d -> E = e*d without bias; causal
// depthwise conv (kernel k) + SiLU on the x branch gives u; (dt_low, B, C) =
// u (W_dt_low, W_B, W_C); delta = softplus(dt_low W_dt + b_dt); selective scan
// with A = -exp(A_log) and skip D; gate y * SiLU(z); out_proj E -> d.
// Block: out = x + Norm(f(x) + rev(f_b(rev(x)))). Norm is layer norm over
// features, or over time when d = 1 (a one-feature layer norm is constant).

struct BiMambaCfg {
  int d = 1;
  int s = 16;
  int k = 5;
  int e = 2;
  bool tied = false;  // backward direction reuses the forward parameters

  int inner() const { return e * d; }
  int dt_rank() const { return (d + 15) / 16; }
  void validate() const;
};

struct BiMamba {
  std::string prefix;
  BiMambaCfg cfg;

  template <class S> void init(ParamStore<S>& store, Rng& rng) const;
  /// Zeros the output projections so the block is the identity.
  template <class S> void zero_output(ParamStore<S>& store) const;

  /// One direction over the given time order (no reversal).
  template <class S>
  ad::Var<S> direction(ad::Tape<S>& tape, ParamStore<S>& store, const std::string& dir, const ad::Var<S>& x) const;
  /// f(x) + rev(f_b(rev x)), pre-norm and pre-residual.
  template <class S> ad::Var<S> bidir(ad::Tape<S>& tape, ParamStore<S>& store, const ad::Var<S>& x) const;
  template <class S> ad::Var<S> forward(ad::Tape<S>& tape, ParamStore<S>& store, const ad::Var<S>& x) const;
};

// ---------------------------------------------------------------------------
// Per-frame 2D conv on (F*H*W) x C feature maps.

struct Conv2d {
  std::string prefix;
  int in = 1;
  int out = 1;
  int kernel = 3;
  int stride = 1;

  template <class S> void init(ParamStore<S>& store, Rng& rng) const;
  template <class S>
  ad::Var<S> forward(ad::Tape<S>& tape, ParamStore<S>& store, const ad::Var<S>& x, int frames, int height,
                     int width) const;
};

/// Per-channel affine normalization with statistics over all rows of a clip.
struct ChannelNorm {
  std::string prefix;
  int channels = 1;

  template <class S> void init(ParamStore<S>& store) const;
  template <class S> ad::Var<S> forward(ad::Tape<S>& tape, ParamStore<S>& store, const ad::Var<S>& x) const;
};

// ---------------------------------------------------------------------------
// Learnable positional encoding, T x d, initialized N(0, 0.02^2).

struct PositionalEncoding {
  std::string name = "pe";
  int frames = 160;
  int dim = 64;

  template <class S> void init(ParamStore<S>& store, Rng& rng) const;
  /// Throws InvalidArgument when (T, d) differs from the stored array.
  template <class S> ad::Var<S> forward(ad::Tape<S>& tape, ParamStore<S>& store, int T, int d) const;
};

// ---------------------------------------------------------------------------
// Checkpoint container: <stem>.bin holds the float32 little-endian arrays back
// to back in store order; <stem>.json holds {version, arrays: [{name, shape,
// offset}], meta}.

template <class S>
void save_params(const ParamStore<S>& store, const std::filesystem::path& stem, const io::json& meta);

/// Loads into a fresh store. Throws DataError on missing, truncated or
/// inconsistent files.
template <class S>
ParamStore<S> load_params(const std::filesystem::path& stem, io::json* meta = nullptr);

/// Copies values by name; every stored name must exist with the same shape.
template <class S>
void assign_params(ParamStore<S>& dst, const ParamStore<S>& src);

}  // namespace lqrppg
