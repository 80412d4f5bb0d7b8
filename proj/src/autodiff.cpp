#include "lqrppg/autodiff.hpp"

#include "lqrppg/errors.hpp"

#include <algorithm>
#include <cmath>

namespace lqrppg::ad {

namespace {

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

template <class S>
using ColVec = Eigen::Matrix<S, Eigen::Dynamic, 1>;

template <class S>
Vec to_vec(const Mat<S>& m) {
  return Eigen::Map<const ColVec<S>>(m.data(), m.size()).template cast<double>();
}

template <class S>
Tape<S>& tape_of(const Var<S>& a) {
  require(a.tape != nullptr, "autodiff: unbound variable");
  return *a.tape;
}

template <class S>
void same_tape(const Var<S>& a, const Var<S>& b) {
  require(a.tape != nullptr && a.tape == b.tape, "autodiff: operands live on different tapes");
}

template <class S>
void require_same_shape(const Var<S>& a, const Var<S>& b, const char* who) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), std::string(who) + ": shape mismatch");
}

template <class S>
void require_row(const Var<S>& r, Eigen::Index cols, const char* who) {
  require(r.rows() == 1 && r.cols() == cols, std::string(who) + ": expected a 1 x " + std::to_string(cols) + " row");
}

template <class S>
Mat<S> scalar_mat(double v) {
  Mat<S> m(1, 1);
  m(0, 0) = static_cast<S>(v);
  return m;
}

/// Valid output range [lo, hi) of t for a tap at offset `off` (reads t + off).
std::pair<Eigen::Index, Eigen::Index> tap_range(Eigen::Index n, Eigen::Index off) {
  return {std::max<Eigen::Index>(0, -off), std::min<Eigen::Index>(n, n - off)};
}

}  // namespace

// ---------------------------------------------------------------------------
// Tape

template <class S>
Var<S> Tape<S>::constant(Mat<S> value) {
  nodes_.push_back(Node{std::move(value), {}, {}, nullptr, false});
  return {this, static_cast<int>(nodes_.size()) - 1};
}

template <class S>
Var<S> Tape<S>::param(Parameter<S>& p) {
  nodes_.push_back(Node{p.value, {}, {}, &p, true});
  return {this, static_cast<int>(nodes_.size()) - 1};
}

template <class S>
Var<S> Tape<S>::record(Mat<S> value, std::initializer_list<int> inputs, Backward fn) {
  bool rg = false;
  for (int i : inputs) rg = rg || nodes_[i].requires_grad;
  nodes_.push_back(Node{std::move(value), {}, rg ? std::move(fn) : Backward{}, nullptr, rg});
  return {this, static_cast<int>(nodes_.size()) - 1};
}

template <class S>
Mat<S>& Tape<S>::grad(int id) {
  Node& n = nodes_[id];
  if (n.grad.size() == 0) n.grad = Mat<S>::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

template <class S>
void Tape<S>::backward(const Var<S>& loss) {
  require(loss.tape == this, "backward: loss belongs to another tape");
  require(value(loss.id).size() == 1, "backward: loss must be 1x1");
  if (!requires_grad(loss.id)) return;
  grad(loss.id)(0, 0) = S(1);
  for (int i = loss.id; i >= 0; --i) {
    Node& n = nodes_[i];
    if (n.grad.size() == 0) continue;
    if (n.fn) n.fn(*this, i);
    if (n.param != nullptr) {
      Parameter<S>& p = *n.param;
      if (p.grad.size() == 0) p.grad = Mat<S>::Zero(p.value.rows(), p.value.cols());
      p.grad += n.grad;
    }
  }
}

template <class S>
void check_finite(const Var<S>& x, const std::string& where) {
  if (!x.value().allFinite()) throw NumericalError("non-finite activations in " + where);
}

// ---------------------------------------------------------------------------
// Linear algebra and elementwise ops

template <class S>
Var<S> matmul(const Var<S>& a, const Var<S>& b) {
  same_tape(a, b);
  require(a.cols() == b.rows(), "matmul: inner dimension mismatch");
  Mat<S> v = a.value() * b.value();
  const int ia = a.id, ib = b.id;
  return a.tape->record(std::move(v), {ia, ib}, [ia, ib](Tape<S>& t, int self) {
    const Mat<S>& g = t.grad(self);
    if (t.requires_grad(ia)) t.grad(ia).noalias() += g * t.value(ib).transpose();
    if (t.requires_grad(ib)) t.grad(ib).noalias() += t.value(ia).transpose() * g;
  });
}

template <class S>
Var<S> add(const Var<S>& a, const Var<S>& b) {
  same_tape(a, b);
  require_same_shape(a, b, "add");
  const int ia = a.id, ib = b.id;
  return a.tape->record(a.value() + b.value(), {ia, ib}, [ia, ib](Tape<S>& t, int self) {
    const Mat<S>& g = t.grad(self);
    if (t.requires_grad(ia)) t.grad(ia) += g;
    if (t.requires_grad(ib)) t.grad(ib) += g;
  });
}

template <class S>
Var<S> sub(const Var<S>& a, const Var<S>& b) {
  same_tape(a, b);
  require_same_shape(a, b, "sub");
  const int ia = a.id, ib = b.id;
  return a.tape->record(a.value() - b.value(), {ia, ib}, [ia, ib](Tape<S>& t, int self) {
    const Mat<S>& g = t.grad(self);
    if (t.requires_grad(ia)) t.grad(ia) += g;
    if (t.requires_grad(ib)) t.grad(ib) -= g;
  });
}

template <class S>
Var<S> mul(const Var<S>& a, const Var<S>& b) {
  same_tape(a, b);
  require_same_shape(a, b, "mul");
  const int ia = a.id, ib = b.id;
  Mat<S> v = a.value().cwiseProduct(b.value());
  return a.tape->record(std::move(v), {ia, ib}, [ia, ib](Tape<S>& t, int self) {
    const Mat<S>& g = t.grad(self);
    if (t.requires_grad(ia)) t.grad(ia) += g.cwiseProduct(t.value(ib));
    if (t.requires_grad(ib)) t.grad(ib) += g.cwiseProduct(t.value(ia));
  });
}

template <class S>
Var<S> scale(const Var<S>& a, double s) {
  const int ia = a.id;
  const S k = static_cast<S>(s);
  return tape_of(a).record(a.value() * k, {ia}, [ia, k](Tape<S>& t, int self) { t.grad(ia) += k * t.grad(self); });
}

template <class S>
Var<S> add_row(const Var<S>& a, const Var<S>& row) {
  same_tape(a, row);
  require_row(row, a.cols(), "add_row");
  Mat<S> v = a.value();
  v.rowwise() += row.value().row(0);
  const int ia = a.id, ir = row.id;
  return a.tape->record(std::move(v), {ia, ir}, [ia, ir](Tape<S>& t, int self) {
    const Mat<S>& g = t.grad(self);
    if (t.requires_grad(ia)) t.grad(ia) += g;
    if (t.requires_grad(ir)) t.grad(ir) += g.colwise().sum();
  });
}

template <class S>
Var<S> sum(const Var<S>& a) {
  const int ia = a.id;
  Mat<S> v(1, 1);
  v(0, 0) = a.value().sum();
  return tape_of(a).record(std::move(v), {ia}, [ia](Tape<S>& t, int self) {
    t.grad(ia).array() += t.grad(self)(0, 0);
  });
}

template <class S>
Var<S> gelu(const Var<S>& a) {
  const int ia = a.id;
  Mat<S> v = a.value().unaryExpr([](S x) { return S(0.5) * x * (S(1) + std::erf(x * S(kInvSqrt2))); });
  return tape_of(a).record(std::move(v), {ia}, [ia](Tape<S>& t, int self) {
    const Mat<S> d = t.value(ia).unaryExpr([](S x) {
      return S(0.5) * (S(1) + std::erf(x * S(kInvSqrt2))) + x * S(kInvSqrt2Pi) * std::exp(S(-0.5) * x * x);
    });
    t.grad(ia) += t.grad(self).cwiseProduct(d);
  });
}

template <class S>
Var<S> silu(const Var<S>& a) {
  const int ia = a.id;
  Mat<S> v = a.value().unaryExpr([](S x) { return x / (S(1) + std::exp(-x)); });
  return tape_of(a).record(std::move(v), {ia}, [ia](Tape<S>& t, int self) {
    const Mat<S> d = t.value(ia).unaryExpr([](S x) {
      const S sg = S(1) / (S(1) + std::exp(-x));
      return sg * (S(1) + x * (S(1) - sg));
    });
    t.grad(ia) += t.grad(self).cwiseProduct(d);
  });
}

template <class S>
Var<S> softplus(const Var<S>& a) {
  const int ia = a.id;
  Mat<S> v = a.value().unaryExpr([](S x) { return std::max(x, S(0)) + std::log1p(std::exp(-std::abs(x))); });
  return tape_of(a).record(std::move(v), {ia}, [ia](Tape<S>& t, int self) {
    const Mat<S> d = t.value(ia).unaryExpr([](S x) { return S(1) / (S(1) + std::exp(-x)); });
    t.grad(ia) += t.grad(self).cwiseProduct(d);
  });
}

template <class S>
Var<S> reverse_rows(const Var<S>& a) {
  const int ia = a.id;
  Mat<S> v = a.value().colwise().reverse();
  return tape_of(a).record(std::move(v), {ia},
                           [ia](Tape<S>& t, int self) { t.grad(ia) += t.grad(self).colwise().reverse(); });
}

template <class S>
Var<S> slice_cols(const Var<S>& a, int first, int count) {
  require(first >= 0 && count >= 0 && first + count <= a.cols(), "slice_cols: range out of bounds");
  const int ia = a.id;
  Mat<S> v = a.value().middleCols(first, count);
  return tape_of(a).record(std::move(v), {ia}, [ia, first, count](Tape<S>& t, int self) {
    t.grad(ia).middleCols(first, count) += t.grad(self);
  });
}

// ---------------------------------------------------------------------------
// Normalization

template <class S>
Var<S> row_norm(const Var<S>& x, const Var<S>& gamma, const Var<S>& beta, double eps) {
  same_tape(x, gamma);
  same_tape(x, beta);
  const Eigen::Index n = x.cols();
  require_row(gamma, n, "row_norm");
  require_row(beta, n, "row_norm");
  const Mat<S>& xv = x.value();
  const ColVec<S> mu = xv.rowwise().mean();
  Mat<S> xhat = xv.colwise() - mu;
  const ColVec<S> inv_sd =
      ((xhat.array().square().rowwise().sum() / S(n)) + S(eps)).rsqrt().matrix();
  xhat = inv_sd.asDiagonal() * xhat;
  Mat<S> v = xhat.array().rowwise() * gamma.value().row(0).array();
  v.rowwise() += beta.value().row(0);
  const int ix = x.id, ig = gamma.id, ib = beta.id;
  return x.tape->record(std::move(v), {ix, ig, ib},
                        [ix, ig, ib, n, xhat = std::move(xhat), inv_sd](Tape<S>& t, int self) {
                          const Mat<S>& g = t.grad(self);
                          if (t.requires_grad(ib)) t.grad(ib) += g.colwise().sum();
                          if (t.requires_grad(ig)) t.grad(ig) += g.cwiseProduct(xhat).colwise().sum();
                          if (t.requires_grad(ix)) {
                            const Mat<S> gx = g.array().rowwise() * t.value(ig).row(0).array();
                            const ColVec<S> m1 = gx.rowwise().mean();
                            const ColVec<S> m2 = gx.cwiseProduct(xhat).rowwise().mean();
                            Mat<S> d = gx.colwise() - m1;
                            d -= m2.asDiagonal() * xhat;
                            t.grad(ix) += inv_sd.asDiagonal() * d;
                          }
                        });
}

template <class S>
Var<S> col_norm(const Var<S>& x, const Var<S>& gamma, const Var<S>& beta, double eps) {
  same_tape(x, gamma);
  same_tape(x, beta);
  const Eigen::Index m = x.rows();
  require_row(gamma, x.cols(), "col_norm");
  require_row(beta, x.cols(), "col_norm");
  const Mat<S>& xv = x.value();
  const Eigen::Matrix<S, 1, Eigen::Dynamic> mu = xv.colwise().mean();
  Mat<S> xhat = xv.rowwise() - mu;
  const Eigen::Matrix<S, 1, Eigen::Dynamic> inv_sd =
      ((xhat.array().square().colwise().sum() / S(m)) + S(eps)).rsqrt().matrix();
  xhat = xhat * inv_sd.asDiagonal();
  Mat<S> v = xhat.array().rowwise() * (gamma.value().row(0).array());
  v.rowwise() += beta.value().row(0);
  const int ix = x.id, ig = gamma.id, ib = beta.id;
  return x.tape->record(std::move(v), {ix, ig, ib},
                        [ix, ig, ib, xhat = std::move(xhat), inv_sd](Tape<S>& t, int self) {
                          const Mat<S>& g = t.grad(self);
                          if (t.requires_grad(ib)) t.grad(ib) += g.colwise().sum();
                          if (t.requires_grad(ig)) t.grad(ig) += g.cwiseProduct(xhat).colwise().sum();
                          if (t.requires_grad(ix)) {
                            const Mat<S> gx = g.array().rowwise() * t.value(ig).row(0).array();
                            const Eigen::Matrix<S, 1, Eigen::Dynamic> m1 = gx.colwise().mean();
                            const Eigen::Matrix<S, 1, Eigen::Dynamic> m2 = gx.cwiseProduct(xhat).colwise().mean();
                            Mat<S> d = gx.rowwise() - m1;
                            d -= xhat * m2.asDiagonal();
                            t.grad(ix) += d * inv_sd.asDiagonal();
                          }
                        });
}

// ---------------------------------------------------------------------------
// Convolutions

template <class S>
Var<S> conv1d(const Var<S>& x, const Var<S>& w, const Var<S>& bias, int k, int dilation, Padding pad) {
  same_tape(x, w);
  same_tape(x, bias);
  require(k >= 1 && dilation >= 1, "conv1d: kernel and dilation must be >= 1");
  const Eigen::Index T = x.rows(), cin = x.cols();
  require(w.rows() == cin * k, "conv1d: weight rows must equal Cin*k");
  const Eigen::Index cout = w.cols();
  require_row(bias, cout, "conv1d");
  const Eigen::Index left = pad == Padding::causal ? dilation * (k - 1) : dilation * (k - 1) / 2;

  const Mat<S>& xv = x.value();
  Mat<S> col = Mat<S>::Zero(T, cin * k);
  for (Eigen::Index c = 0; c < cin; ++c) {
    for (int j = 0; j < k; ++j) {
      const Eigen::Index off = j * dilation - left;
      const auto [lo, hi] = tap_range(T, off);
      if (hi > lo) col.col(c * k + j).segment(lo, hi - lo) = xv.col(c).segment(lo + off, hi - lo);
    }
  }
  Mat<S> v = col * w.value();
  v.rowwise() += bias.value().row(0);
  const int ix = x.id, iw = w.id, ib = bias.id;
  return x.tape->record(
      std::move(v), {ix, iw, ib},
      [ix, iw, ib, k, dilation, left, cin, T, col = std::move(col)](Tape<S>& t, int self) {
        const Mat<S>& g = t.grad(self);
        if (t.requires_grad(iw)) t.grad(iw).noalias() += col.transpose() * g;
        if (t.requires_grad(ib)) t.grad(ib) += g.colwise().sum();
        if (t.requires_grad(ix)) {
          const Mat<S> gcol = g * t.value(iw).transpose();
          Mat<S>& gx = t.grad(ix);
          for (Eigen::Index c = 0; c < cin; ++c) {
            for (int j = 0; j < k; ++j) {
              const Eigen::Index off = j * dilation - left;
              const auto [lo, hi] = tap_range(T, off);
              if (hi > lo) gx.col(c).segment(lo + off, hi - lo) += gcol.col(c * k + j).segment(lo, hi - lo);
            }
          }
        }
      });
}

template <class S>
Var<S> depthwise_causal_conv1d(const Var<S>& x, const Var<S>& w, const Var<S>& bias) {
  same_tape(x, w);
  same_tape(x, bias);
  const Eigen::Index T = x.rows(), e = x.cols();
  require(w.cols() == e && w.rows() >= 1, "depthwise_causal_conv1d: weight must be k x E");
  require_row(bias, e, "depthwise_causal_conv1d");
  const Eigen::Index k = w.rows();
  const Mat<S>& xv = x.value();
  const Mat<S>& wv = w.value();
  Mat<S> v(T, e);
  v.rowwise() = bias.value().row(0);
  for (Eigen::Index j = 0; j < k; ++j) {
    const Eigen::Index off = j - (k - 1);
    const auto [lo, hi] = tap_range(T, off);
    if (hi > lo)
      v.middleRows(lo, hi - lo).array() += xv.middleRows(lo + off, hi - lo).array().rowwise() * wv.row(j).array();
  }
  const int ix = x.id, iw = w.id, ib = bias.id;
  return x.tape->record(std::move(v), {ix, iw, ib}, [ix, iw, ib, k, T](Tape<S>& t, int self) {
    const Mat<S>& g = t.grad(self);
    if (t.requires_grad(ib)) t.grad(ib) += g.colwise().sum();
    for (Eigen::Index j = 0; j < k; ++j) {
      const Eigen::Index off = j - (k - 1);
      const auto [lo, hi] = tap_range(T, off);
      if (hi <= lo) continue;
      if (t.requires_grad(iw))
        t.grad(iw).row(j) += g.middleRows(lo, hi - lo).cwiseProduct(t.value(ix).middleRows(lo + off, hi - lo))
                                 .colwise()
                                 .sum();
      if (t.requires_grad(ix))
        t.grad(ix).middleRows(lo + off, hi - lo).array() +=
            g.middleRows(lo, hi - lo).array().rowwise() * t.value(iw).row(j).array();
    }
  });
}

int conv2d_out_size(int in, int k, int stride) {
  const int p = (k - 1) / 2;
  return (in + 2 * p - k) / stride + 1;
}

namespace {

/// Calls fn(col_row, col_index, src_row) for every in-bounds tap of conv2d.
template <class Fn>
void for_each_conv2d_tap(int frames, int height, int width, int cin, int k, int stride, Fn&& fn) {
  const int p = (k - 1) / 2;
  const int ho = conv2d_out_size(height, k, stride), wo = conv2d_out_size(width, k, stride);
  for (int c = 0; c < cin; ++c) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const Eigen::Index ci = (static_cast<Eigen::Index>(c) * k + ky) * k + kx;
        for (int f = 0; f < frames; ++f) {
          for (int oy = 0; oy < ho; ++oy) {
            const int iy = oy * stride - p + ky;
            if (iy < 0 || iy >= height) continue;
            const Eigen::Index out_base = (static_cast<Eigen::Index>(f) * ho + oy) * wo;
            const Eigen::Index in_base = (static_cast<Eigen::Index>(f) * height + iy) * width;
            for (int ox = 0; ox < wo; ++ox) {
              const int ix = ox * stride - p + kx;
              if (ix < 0 || ix >= width) continue;
              fn(out_base + ox, ci, in_base + ix, c);
            }
          }
        }
      }
    }
  }
}

}  // namespace

template <class S>
Var<S> conv2d(const Var<S>& x, const Var<S>& w, const Var<S>& bias, int frames, int height, int width, int k,
              int stride) {
  same_tape(x, w);
  same_tape(x, bias);
  require(k >= 1 && stride >= 1, "conv2d: kernel and stride must be >= 1");
  require(x.rows() == static_cast<Eigen::Index>(frames) * height * width, "conv2d: input rows must equal F*H*W");
  const int cin = static_cast<int>(x.cols());
  require(w.rows() == static_cast<Eigen::Index>(cin) * k * k, "conv2d: weight rows must equal Cin*k*k");
  require_row(bias, w.cols(), "conv2d");
  const int ho = conv2d_out_size(height, k, stride), wo = conv2d_out_size(width, k, stride);
  require(ho >= 1 && wo >= 1, "conv2d: input smaller than kernel");

  const Mat<S>& xv = x.value();
  Mat<S> col = Mat<S>::Zero(static_cast<Eigen::Index>(frames) * ho * wo, w.rows());
  for_each_conv2d_tap(frames, height, width, cin, k, stride,
                      [&](Eigen::Index r, Eigen::Index ci, Eigen::Index src, int c) { col(r, ci) = xv(src, c); });
  Mat<S> v = col * w.value();
  v.rowwise() += bias.value().row(0);
  const int ix = x.id, iw = w.id, ib = bias.id;
  return x.tape->record(
      std::move(v), {ix, iw, ib},
      [ix, iw, ib, frames, height, width, cin, k, stride, col = std::move(col)](Tape<S>& t, int self) {
        const Mat<S>& g = t.grad(self);
        if (t.requires_grad(iw)) t.grad(iw).noalias() += col.transpose() * g;
        if (t.requires_grad(ib)) t.grad(ib) += g.colwise().sum();
        if (t.requires_grad(ix)) {
          const Mat<S> gcol = g * t.value(iw).transpose();
          Mat<S>& gx = t.grad(ix);
          for_each_conv2d_tap(frames, height, width, cin, k, stride,
                              [&](Eigen::Index r, Eigen::Index ci, Eigen::Index src, int c) {
                                gx(src, c) += gcol(r, ci);
                              });
        }
      });
}

template <class S>
Var<S> spatial_mean(const Var<S>& x, int pixels) {
  require(pixels >= 1 && x.rows() % pixels == 0, "spatial_mean: rows must be a multiple of the pixel count");
  const Eigen::Index frames = x.rows() / pixels;
  Mat<S> v(frames, x.cols());
  for (Eigen::Index f = 0; f < frames; ++f) v.row(f) = x.value().middleRows(f * pixels, pixels).colwise().mean();
  const int ix = x.id;
  return tape_of(x).record(std::move(v), {ix}, [ix, pixels, frames](Tape<S>& t, int self) {
    const Mat<S>& g = t.grad(self);
    Mat<S>& gx = t.grad(ix);
    const S inv = S(1) / S(pixels);
    for (Eigen::Index f = 0; f < frames; ++f) gx.middleRows(f * pixels, pixels).rowwise() += inv * g.row(f);
  });
}

// ---------------------------------------------------------------------------
// Selective scan

template <class S>
Var<S> selective_scan(const Var<S>& u, const Var<S>& delta, const Var<S>& a_log, const Var<S>& b, const Var<S>& c,
                      const Var<S>& d) {
  for (const Var<S>* v : {&delta, &a_log, &b, &c, &d}) same_tape(u, *v);
  const Eigen::Index T = u.rows(), E = u.cols(), N = a_log.cols();
  require_same_shape(u, delta, "selective_scan");
  require(a_log.rows() == E, "selective_scan: a_log must be E x N");
  require(b.rows() == T && b.cols() == N && c.rows() == T && c.cols() == N, "selective_scan: B and C must be T x N");
  require_row(d, E, "selective_scan");

  const Mat<S> A = -a_log.value().array().exp().matrix();
  const Mat<S>& uv = u.value();
  const Mat<S>& dv = delta.value();
  const Mat<S> bt = b.value().transpose();  // N x T, contiguous per step
  const Mat<S> ct = c.value().transpose();
  const Mat<S> at = A.transpose();  // N x E

  // h and exp(delta*A) for every (t, e, n), n fastest.
  std::vector<S> h(static_cast<std::size_t>(T * E * N));
  std::vector<S> da(h.size());
  Mat<S> y(T, E);
  for (Eigen::Index t = 0; t < T; ++t) {
    for (Eigen::Index e = 0; e < E; ++e) {
      const S dt = dv(t, e), ut = uv(t, e);
      const S* bn = bt.col(t).data();
      const S* cn = ct.col(t).data();
      const S* an = at.col(e).data();
      S* ht = h.data() + (t * E + e) * N;
      S* dat = da.data() + (t * E + e) * N;
      const S* hp = t > 0 ? h.data() + ((t - 1) * E + e) * N : nullptr;
      S acc = 0;
      for (Eigen::Index n = 0; n < N; ++n) {
        dat[n] = std::exp(dt * an[n]);
        ht[n] = (hp ? dat[n] * hp[n] : S(0)) + dt * bn[n] * ut;
        acc += cn[n] * ht[n];
      }
      y(t, e) = acc + d.value()(0, e) * ut;
    }
  }

  const int iu = u.id, idl = delta.id, ia = a_log.id, ib = b.id, ic = c.id, id = d.id;
  return u.tape->record(
      std::move(y), {iu, idl, ia, ib, ic, id},
      [=, h = std::move(h), da = std::move(da)](Tape<S>& t, int self) {
        const Mat<S>& g = t.grad(self);
        const Mat<S>& uv2 = t.value(iu);
        const Mat<S>& dv2 = t.value(idl);
        const Mat<S>& dd = t.value(id);
        Mat<S> gu = Mat<S>::Zero(T, E), gdelta = Mat<S>::Zero(T, E);
        Mat<S> gbt = Mat<S>::Zero(N, T), gct = Mat<S>::Zero(N, T);
        Mat<S> gat = Mat<S>::Zero(N, E);
        Mat<S> gd = Mat<S>::Zero(1, E);
        Mat<S> gh = Mat<S>::Zero(N, E);  // d loss / d h_t carried backward in time
        for (Eigen::Index tt = T - 1; tt >= 0; --tt) {
          const S* bn = bt.col(tt).data();
          const S* cn = ct.col(tt).data();
          S* gbn = gbt.col(tt).data();
          S* gcn = gct.col(tt).data();
          for (Eigen::Index e = 0; e < E; ++e) {
            const S gy = g(tt, e), ut = uv2(tt, e), dt = dv2(tt, e);
            gd(0, e) += gy * ut;
            S gu_acc = gy * dd(0, e);
            S gdelta_acc = 0;
            const S* an = at.col(e).data();
            S* gan = gat.col(e).data();
            S* ghn = gh.col(e).data();
            const S* ht = h.data() + (tt * E + e) * N;
            const S* dat = da.data() + (tt * E + e) * N;
            const S* hp = tt > 0 ? h.data() + ((tt - 1) * E + e) * N : nullptr;
            for (Eigen::Index n = 0; n < N; ++n) {
              const S gtot = ghn[n] + gy * cn[n];
              gcn[n] += gy * ht[n];
              const S gda = hp ? gtot * hp[n] : S(0);
              gdelta_acc += gda * dat[n] * an[n] + gtot * bn[n] * ut;
              gan[n] += gda * dat[n] * dt;
              gbn[n] += gtot * dt * ut;
              gu_acc += gtot * dt * bn[n];
              ghn[n] = gtot * dat[n];
            }
            gu(tt, e) += gu_acc;
            gdelta(tt, e) += gdelta_acc;
          }
        }
        if (t.requires_grad(iu)) t.grad(iu) += gu;
        if (t.requires_grad(idl)) t.grad(idl) += gdelta;
        if (t.requires_grad(ia)) t.grad(ia) += gat.transpose().cwiseProduct(A);  // dA/da_log = A
        if (t.requires_grad(ib)) t.grad(ib) += gbt.transpose();
        if (t.requires_grad(ic)) t.grad(ic) += gct.transpose();
        if (t.requires_grad(id)) t.grad(id) += gd;
      });
}

// ---------------------------------------------------------------------------
// Codebook-facing ops

namespace {

/// Row-wise softmax of -|l_t - c_k| / tau and the per-entry slope
/// d s_k / d l_t = -sign(l_t - c_k) / tau.
struct DistanceSoftmax {
  Eigen::MatrixXd p;      // T x K
  Eigen::MatrixXd slope;  // T x K
  Eigen::MatrixXd logp;   // T x K
};

DistanceSoftmax distance_softmax(const Vec& l, const Vec& codes, double tau) {
  require(tau > 0.0, "codebook softmax: temperature must be positive");
  require(codes.size() >= 1, "codebook softmax: empty codebook");
  const Eigen::Index T = l.size(), K = codes.size();
  DistanceSoftmax out{Eigen::MatrixXd(T, K), Eigen::MatrixXd(T, K), Eigen::MatrixXd(T, K)};
  for (Eigen::Index t = 0; t < T; ++t) {
    double m = -std::numeric_limits<double>::infinity();
    for (Eigen::Index k = 0; k < K; ++k) {
      const double diff = l[t] - codes[k];
      out.logp(t, k) = -std::abs(diff) / tau;
      out.slope(t, k) = diff > 0 ? -1.0 / tau : (diff < 0 ? 1.0 / tau : 0.0);
      m = std::max(m, out.logp(t, k));
    }
    const double lse = m + std::log((out.logp.row(t).array() - m).exp().sum());
    out.logp.row(t).array() -= lse;
    out.p.row(t) = out.logp.row(t).array().exp();
  }
  return out;
}

}  // namespace

template <class S>
Var<S> soft_reconstruct(const Var<S>& logits, const Vec& codes, double tau) {
  require(logits.cols() == 1, "soft_reconstruct: logits must be T x 1");
  if (!logits.value().allFinite()) throw InvalidArgument("soft_reconstruct: non-finite logits");
  const DistanceSoftmax sm = distance_softmax(to_vec(logits.value()), codes, tau);
  const Vec out = sm.p * codes;
  // d out_t / d l_t = sum_k p_k * slope_k * (c_k - out_t)
  Vec dout(out.size());
  for (Eigen::Index t = 0; t < out.size(); ++t)
    dout[t] = (sm.p.row(t).array() * sm.slope.row(t).array() * (codes.transpose().array() - out[t])).sum();
  const int il = logits.id;
  return tape_of(logits).record(out.cast<S>(), {il}, [il, dout](Tape<S>& t, int self) {
    t.grad(il) += t.grad(self).cwiseProduct(dout.cast<S>());
  });
}

template <class S>
Var<S> distance_ce(const Var<S>& logits, const Vec& codes, const std::vector<int>& indices, double tau) {
  require(logits.cols() == 1, "distance_ce: logits must be T x 1");
  const Eigen::Index T = logits.rows();
  require(static_cast<Eigen::Index>(indices.size()) == T, "distance_ce: index array length must equal T");
  if (!logits.value().allFinite()) throw InvalidArgument("distance_ce: non-finite logits");
  const DistanceSoftmax sm = distance_softmax(to_vec(logits.value()), codes, tau);
  double loss = 0.0;
  Vec dl(T);
  for (Eigen::Index t = 0; t < T; ++t) {
    const int i = indices[t];
    require(i >= 0 && i < codes.size(), "distance_ce: code index out of range");
    loss -= sm.logp(t, i);
    dl[t] = -(sm.slope(t, i) - sm.p.row(t).dot(sm.slope.row(t))) / static_cast<double>(T);
  }
  loss /= static_cast<double>(T);
  const int il = logits.id;
  return tape_of(logits).record(scalar_mat<S>(loss), {il}, [il, dl](Tape<S>& t, int self) {
    t.grad(il) += t.grad(self)(0, 0) * dl.cast<S>();
  });
}

template <class S>
Var<S> ste(const Var<S>& z, const Mat<S>& q) {
  require(z.rows() == q.rows() && z.cols() == q.cols(), "ste: shape mismatch");
  const int iz = z.id;
  return tape_of(z).record(q, {iz}, [iz](Tape<S>& t, int self) { t.grad(iz) += t.grad(self); });
}

template <class S>
Var<S> stop_gradient(const Var<S>& a) {
  return tape_of(a).constant(a.value());
}

// ---------------------------------------------------------------------------
// Losses

template <class S>
Var<S> neg_pearson(const Var<S>& pred, const Vec& target) {
  require(pred.cols() == 1, "neg_pearson: prediction must be T x 1");
  const NegPearsonGrad r = lqrppg::neg_pearson_grad(to_vec(pred.value()), target);
  const int ip = pred.id;
  return tape_of(pred).record(scalar_mat<S>(r.value), {ip}, [ip, ga = r.grad_a](Tape<S>& t, int self) {
    t.grad(ip) += t.grad(self)(0, 0) * ga.cast<S>();
  });
}

template <class S>
Var<S> spectral_ce(const Var<S>& pred, int target_bin, const BandBins& bins) {
  require(pred.cols() == 1, "spectral_ce: prediction must be T x 1");
  const SpectralCeGrad r = lqrppg::spectral_ce_grad(to_vec(pred.value()), target_bin, bins);
  const int ip = pred.id;
  return tape_of(pred).record(scalar_mat<S>(r.value), {ip}, [ip, gr = r.grad](Tape<S>& t, int self) {
    t.grad(ip) += t.grad(self)(0, 0) * gr.cast<S>();
  });
}

template <class S>
Var<S> sq_l2_sum(const Var<S>& a, const Mat<S>& target) {
  require(a.rows() == target.rows() && a.cols() == target.cols(), "sq_l2_sum: shape mismatch");
  Mat<S> diff = a.value() - target;
  Mat<S> v(1, 1);
  v(0, 0) = diff.squaredNorm();
  const int ia = a.id;
  return tape_of(a).record(std::move(v), {ia}, [ia, diff = std::move(diff)](Tape<S>& t, int self) {
    t.grad(ia) += (S(2) * t.grad(self)(0, 0)) * diff;
  });
}

template <class S>
Var<S> mse(const Var<S>& a, const Mat<S>& target) {
  require(a.rows() * a.cols() > 0, "mse: empty input");
  return scale(sq_l2_sum(a, target), 1.0 / static_cast<double>(a.rows() * a.cols()));
}

template <class S>
Var<S> smooth_l1(const Var<S>& a, const Mat<S>& target, double beta) {
  require(beta > 0.0, "smooth_l1: beta must be positive");
  require(a.rows() == target.rows() && a.cols() == target.cols(), "smooth_l1: shape mismatch");
  const Mat<S> diff = a.value() - target;
  const double n = static_cast<double>(diff.size());
  const S bt = static_cast<S>(beta);
  const Mat<S> val = diff.unaryExpr([bt](S d) { return std::abs(d) < bt ? S(0.5) * d * d / bt : std::abs(d) - S(0.5) * bt; });
  const Mat<S> slope = diff.unaryExpr([bt](S d) { return std::abs(d) < bt ? d / bt : (d > 0 ? S(1) : S(-1)); });
  const int ia = a.id;
  return tape_of(a).record(scalar_mat<S>(static_cast<double>(val.sum()) / n), {ia},
                           [ia, slope, n](Tape<S>& t, int self) {
                             t.grad(ia) += (t.grad(self)(0, 0) / static_cast<S>(n)) * slope;
                           });
}

template <class S>
Var<S> gaussian_nll(const Var<S>& pred, const Var<S>& log_sd, const Mat<S>& label) {
  same_tape(pred, log_sd);
  require_same_shape(pred, log_sd, "gaussian_nll");
  require(pred.rows() == label.rows() && pred.cols() == label.cols(), "gaussian_nll: label shape mismatch");
  const Mat<S> diff = pred.value() - label;
  const Mat<S> prec = (S(-2) * log_sd.value()).array().exp().matrix();
  const double n = static_cast<double>(diff.size());
  const double v =
      0.5 * static_cast<double>((diff.array().square() * prec.array() + S(2) * log_sd.value().array()).sum()) / n;
  const int ip = pred.id, is = log_sd.id;
  return pred.tape->record(scalar_mat<S>(v), {ip, is}, [ip, is, diff, prec, n](Tape<S>& t, int self) {
    const S g = t.grad(self)(0, 0) / static_cast<S>(n);
    if (t.requires_grad(ip)) t.grad(ip) += g * diff.cwiseProduct(prec);
    if (t.requires_grad(is)) t.grad(is).array() += g * (S(1) - diff.array().square() * prec.array());
  });
}

// ---------------------------------------------------------------------------

#define LQRPPG_AD_INSTANTIATE(S)                                                                                 \
  template class Tape<S>;                                                                                        \
  template void check_finite(const Var<S>&, const std::string&);                                                 \
  template Var<S> matmul(const Var<S>&, const Var<S>&);                                                          \
  template Var<S> add(const Var<S>&, const Var<S>&);                                                             \
  template Var<S> sub(const Var<S>&, const Var<S>&);                                                             \
  template Var<S> mul(const Var<S>&, const Var<S>&);                                                             \
  template Var<S> scale(const Var<S>&, double);                                                                  \
  template Var<S> add_row(const Var<S>&, const Var<S>&);                                                         \
  template Var<S> sum(const Var<S>&);                                                                            \
  template Var<S> gelu(const Var<S>&);                                                                           \
  template Var<S> silu(const Var<S>&);                                                                           \
  template Var<S> softplus(const Var<S>&);                                                                       \
  template Var<S> reverse_rows(const Var<S>&);                                                                   \
  template Var<S> slice_cols(const Var<S>&, int, int);                                                           \
  template Var<S> row_norm(const Var<S>&, const Var<S>&, const Var<S>&, double);                                 \
  template Var<S> col_norm(const Var<S>&, const Var<S>&, const Var<S>&, double);                                 \
  template Var<S> conv1d(const Var<S>&, const Var<S>&, const Var<S>&, int, int, Padding);                        \
  template Var<S> depthwise_causal_conv1d(const Var<S>&, const Var<S>&, const Var<S>&);                          \
  template Var<S> conv2d(const Var<S>&, const Var<S>&, const Var<S>&, int, int, int, int, int);                  \
  template Var<S> spatial_mean(const Var<S>&, int);                                                              \
  template Var<S> selective_scan(const Var<S>&, const Var<S>&, const Var<S>&, const Var<S>&, const Var<S>&,      \
                                 const Var<S>&);                                                                 \
  template Var<S> soft_reconstruct(const Var<S>&, const Vec&, double);                                           \
  template Var<S> distance_ce(const Var<S>&, const Vec&, const std::vector<int>&, double);                       \
  template Var<S> ste(const Var<S>&, const Mat<S>&);                                                             \
  template Var<S> stop_gradient(const Var<S>&);                                                                  \
  template Var<S> neg_pearson(const Var<S>&, const Vec&);                                                        \
  template Var<S> spectral_ce(const Var<S>&, int, const BandBins&);                                              \
  template Var<S> sq_l2_sum(const Var<S>&, const Mat<S>&);                                                       \
  template Var<S> mse(const Var<S>&, const Mat<S>&);                                                             \
  template Var<S> smooth_l1(const Var<S>&, const Mat<S>&, double);                                               \
  template Var<S> gaussian_nll(const Var<S>&, const Var<S>&, const Mat<S>&);

LQRPPG_AD_INSTANTIATE(float)
LQRPPG_AD_INSTANTIATE(double)

#undef LQRPPG_AD_INSTANTIATE

}  // namespace lqrppg::ad
