#pragma once

// Reverse-mode differentiation over dense matrices.
//
// A Tape records one forward pass. Every op computes its value eagerly and
// registers a closure that, given the node's upstream gradient, accumulates
// into the gradients of its inputs. backward() runs the closures in reverse
// creation order and then adds each parameter leaf's gradient into the
// owning Parameter. Tapes are single-use and single-threaded.
//
// Sequences are T x d matrices (time along rows). Frame feature maps are
// (F*H*W) x C with row index (f*H + h)*W + w.

#include "lqrppg/signal.hpp"

#include <Eigen/Core>

#include <deque>
#include <functional>
#include <string>
#include <vector>

namespace lqrppg::ad {

template <class S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;

template <class S>
struct Parameter {
  std::string name;
  Mat<S> value;
  Mat<S> grad;  // same shape as value once zero_grad() has run
};

template <class S>
class Tape;

/// Handle to a tape node. Cheap to copy; valid while its tape lives.
template <class S>
struct Var {
  Tape<S>* tape = nullptr;
  int id = -1;

  const Mat<S>& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  /// Value of a 1x1 node.
  S scalar() const;
};

template <class S>
class Tape {
 public:
  using Backward = std::function<void(Tape&, int)>;

  Var<S> constant(Mat<S> value);
  Var<S> param(Parameter<S>& p);
  /// Adds a node whose gradient is tracked iff any input's is.
  Var<S> record(Mat<S> value, std::initializer_list<int> inputs, Backward fn);

  const Mat<S>& value(int id) const { return nodes_[id].value; }
  bool requires_grad(int id) const { return nodes_[id].requires_grad; }
  /// Gradient slot of node `id`, zero-initialized on first access.
  Mat<S>& grad(int id);
  bool has_grad(int id) const { return nodes_[id].grad.size() > 0; }

  /// Seeds d loss / d loss = 1, runs every closure and flushes parameter
  /// gradients. `loss` must be 1x1.
  void backward(const Var<S>& loss);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Mat<S> value;
    Mat<S> grad;
    Backward fn;
    Parameter<S>* param = nullptr;
    bool requires_grad = false;
  };
  std::deque<Node> nodes_;  // deque keeps element addresses stable under push_back
};

template <class S>
const Mat<S>& Var<S>::value() const {
  return tape->value(id);
}

template <class S>
S Var<S>::scalar() const {
  return value()(0, 0);
}

/// Throws NumericalError naming `where` when the node holds a non-finite value.
template <class S>
void check_finite(const Var<S>& x, const std::string& where);

// ---------------------------------------------------------------------------
// Linear algebra and elementwise ops

template <class S> Var<S> matmul(const Var<S>& a, const Var<S>& b);
template <class S> Var<S> add(const Var<S>& a, const Var<S>& b);
template <class S> Var<S> sub(const Var<S>& a, const Var<S>& b);
template <class S> Var<S> mul(const Var<S>& a, const Var<S>& b);
template <class S> Var<S> scale(const Var<S>& a, double s);
/// a (m x n) plus a 1 x n row broadcast over rows.
template <class S> Var<S> add_row(const Var<S>& a, const Var<S>& row);
/// Sum of all entries, 1x1.
template <class S> Var<S> sum(const Var<S>& a);
template <class S> Var<S> gelu(const Var<S>& a);
template <class S> Var<S> silu(const Var<S>& a);
template <class S> Var<S> softplus(const Var<S>& a);
/// Reverses the row (time) order.
template <class S> Var<S> reverse_rows(const Var<S>& a);
/// Columns [first, first + count).
template <class S> Var<S> slice_cols(const Var<S>& a, int first, int count);

// ---------------------------------------------------------------------------
// Normalization

/// Each row standardized over its columns, then scaled/shifted by 1 x n
/// gamma/beta (layer norm over features).
template <class S> Var<S> row_norm(const Var<S>& x, const Var<S>& gamma, const Var<S>& beta, double eps = 1e-5);
/// Each column standardized over all rows (time, or frames and pixels).
template <class S> Var<S> col_norm(const Var<S>& x, const Var<S>& gamma, const Var<S>& beta, double eps = 1e-5);

// ---------------------------------------------------------------------------
// Convolutions

enum class Padding { same, causal };

/// x: T x Cin, w: (Cin*k) x Cout with row index c*k + j, bias 1 x Cout.
/// Zero padding keeps the output length T.
template <class S>
Var<S> conv1d(const Var<S>& x, const Var<S>& w, const Var<S>& bias, int k, int dilation, Padding pad);

/// Per-channel causal conv. x: T x E, w: k x E (row k-1 multiplies x[t]),
/// bias 1 x E.
template <class S> Var<S> depthwise_causal_conv1d(const Var<S>& x, const Var<S>& w, const Var<S>& bias);

/// Per-frame 2D conv over feature maps. x: (F*H*W) x Cin, w: (Cin*k*k) x Cout
/// with row index (c*k + ky)*k + kx, bias 1 x Cout, zero padding (k-1)/2.
/// Output spatial size (H + 2p - k)/stride + 1 per axis.
template <class S>
Var<S> conv2d(const Var<S>& x, const Var<S>& w, const Var<S>& bias, int frames, int height, int width, int k,
              int stride);

/// Output spatial extent of conv2d along one axis.
int conv2d_out_size(int in, int k, int stride);

/// Average over the `pixels` consecutive rows belonging to each frame.
template <class S> Var<S> spatial_mean(const Var<S>& x, int pixels);

// ---------------------------------------------------------------------------
// Selective state-space scan (one direction)
//
//   A = -exp(a_log),  h_t = exp(delta_t * A) * h_{t-1} + delta_t * B_t * u_t,
//   y_t = <C_t, h_t> + D * u_t,  h_{-1} = 0
//
// u, delta: T x E; a_log: E x N; b, c: T x N; d: 1 x E. Returns T x E.
template <class S>
Var<S> selective_scan(const Var<S>& u, const Var<S>& delta, const Var<S>& a_log, const Var<S>& b, const Var<S>& c,
                      const Var<S>& d);

// ---------------------------------------------------------------------------
// Codebook-facing ops. Codes are constants; logits are T x 1.

/// out_t = sum_k softmax_k(-|l_t - c_k| / tau) * c_k.
template <class S> Var<S> soft_reconstruct(const Var<S>& logits, const Vec& codes, double tau = 1.0);

/// -(1/T) sum_t log softmax_{i_t}(-|l_t - c_k| / tau), 1x1.
template <class S>
Var<S> distance_ce(const Var<S>& logits, const Vec& codes, const std::vector<int>& indices, double tau = 1.0);

/// Value of q, gradient passed to z unchanged (straight-through).
template <class S> Var<S> ste(const Var<S>& z, const Mat<S>& q);
template <class S> Var<S> stop_gradient(const Var<S>& a);

// ---------------------------------------------------------------------------
// Losses (1x1). Targets are constants.

/// 1 - rho(pred, target) for a T x 1 prediction.
template <class S> Var<S> neg_pearson(const Var<S>& pred, const Vec& target);
/// Spectral cross-entropy of a T x 1 prediction against an absolute bin.
template <class S> Var<S> spectral_ce(const Var<S>& pred, int target_bin, const BandBins& bins);
/// sum (a - target)^2.
template <class S> Var<S> sq_l2_sum(const Var<S>& a, const Mat<S>& target);
/// mean (a - target)^2.
template <class S> Var<S> mse(const Var<S>& a, const Mat<S>& target);
/// mean SmoothL1 with transition at beta.
template <class S> Var<S> smooth_l1(const Var<S>& a, const Mat<S>& target, double beta = 1.0);
/// mean 0.5 * [(pred - label)^2 / exp(2 s) + 2 s], s = per-step log std.
template <class S> Var<S> gaussian_nll(const Var<S>& pred, const Var<S>& log_sd, const Mat<S>& label);

}  // namespace lqrppg::ad
