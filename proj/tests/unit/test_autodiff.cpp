#include "lqrppg/autodiff.hpp"
#include "lqrppg/errors.hpp"
#include "support/gradcheck.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <functional>

namespace lqrppg {
namespace {

using ad::Mat;
using ad::Var;
using Build = std::function<Var<double>(ad::Tape<double>&, ParamStore<double>&)>;

/// Reduces an op output to a scalar through a fixed random projection so
/// every output entry carries a distinct weight.
Var<double> project(ad::Tape<double>& t, const Var<double>& y, unsigned seed) {
  Rng rng(seed);
  const Eigen::MatrixXd r = gaussian(y.rows(), y.cols(), 1.0, rng);
  return ad::sum(ad::mul(y, t.constant(r)));
}

double check(ParamStore<double>& store, const Build& build) {
  const auto r = testing::grad_check(store, build);
  EXPECT_GT(r.analytic_norm, 0.0);
  return r.rel_error;
}

ParamStore<double> store_with(std::initializer_list<std::pair<const char*, Eigen::MatrixXd>> items) {
  ParamStore<double> s;
  for (const auto& [name, v] : items) s.add(name, v);
  return s;
}

Eigen::MatrixXd randn(int r, int c, unsigned seed, double sd = 1.0) {
  Rng rng(seed);
  return gaussian(r, c, sd, rng);
}

TEST(Autodiff, MatmulAddSubMulGradients) {
  auto s = store_with({{"a", randn(4, 3, 1)}, {"b", randn(3, 5, 2)}, {"c", randn(4, 5, 3)}});
  const double e = check(s, [](auto& t, auto& st) {
    const auto a = use(t, st, "a"), b = use(t, st, "b"), c = use(t, st, "c");
    const auto y = ad::mul(ad::sub(ad::matmul(a, b), c), ad::add(c, ad::scale(c, 0.5)));
    return project(t, y, 9);
  });
  EXPECT_LT(e, 1e-6);
}

TEST(Autodiff, ActivationGradients) {
  auto s = store_with({{"x", randn(6, 4, 4, 2.0)}});
  for (int which = 0; which < 3; ++which) {
    const double e = check(s, [which](auto& t, auto& st) {
      const auto x = use(t, st, "x");
      const auto y = which == 0 ? ad::gelu(x) : which == 1 ? ad::silu(x) : ad::softplus(x);
      return project(t, y, 10);
    });
    EXPECT_LT(e, 1e-6) << "activation " << which;
  }
}

TEST(Autodiff, RowBroadcastReverseSliceGradients) {
  auto s = store_with({{"x", randn(5, 3, 5)}, {"r", randn(1, 3, 6)}});
  const double e = check(s, [](auto& t, auto& st) {
    const auto y = ad::reverse_rows(ad::add_row(use(t, st, "x"), use(t, st, "r")));
    return project(t, ad::slice_cols(y, 1, 2), 11);
  });
  EXPECT_LT(e, 1e-6);
}

TEST(Autodiff, NormGradients) {
  auto s = store_with({{"x", randn(7, 4, 7, 3.0)}, {"g", randn(1, 4, 8)}, {"b", randn(1, 4, 9)}});
  for (bool rows : {true, false}) {
    const double e = check(s, [rows](auto& t, auto& st) {
      const auto x = use(t, st, "x"), g = use(t, st, "g"), b = use(t, st, "b");
      return project(t, rows ? ad::row_norm(x, g, b) : ad::col_norm(x, g, b), 12);
    });
    EXPECT_LT(e, 1e-5) << (rows ? "row_norm" : "col_norm");
  }
}

TEST(Autodiff, RowNormStandardizesEachRow) {
  ad::Tape<double> t;
  const auto x = t.constant(randn(5, 6, 13, 4.0));
  const auto y = ad::row_norm(x, t.constant(Eigen::MatrixXd::Ones(1, 6)), t.constant(Eigen::MatrixXd::Zero(1, 6)), 0.0);
  for (int i = 0; i < 5; ++i) {
    EXPECT_NEAR(y.value().row(i).mean(), 0.0, 1e-12);
    EXPECT_NEAR(y.value().row(i).squaredNorm() / 6.0, 1.0, 1e-12);
  }
}

TEST(Autodiff, Conv1dGradientsSameAndCausal) {
  auto s = store_with({{"x", randn(9, 2, 14)}, {"w", randn(2 * 3, 4, 15)}, {"b", randn(1, 4, 16)}});
  for (auto pad : {ad::Padding::same, ad::Padding::causal}) {
    for (int dil : {1, 2, 4}) {
      const double e = check(s, [pad, dil](auto& t, auto& st) {
        return project(t, ad::conv1d(use(t, st, "x"), use(t, st, "w"), use(t, st, "b"), 3, dil, pad), 17);
      });
      EXPECT_LT(e, 1e-6) << "dilation " << dil;
    }
  }
}

TEST(Autodiff, Conv1dMatchesDirectSum) {
  // Oracle: explicit zero-padded correlation.
  const Eigen::MatrixXd x = randn(8, 2, 18), w = randn(2 * 5, 3, 19), b = randn(1, 3, 20);
  const int k = 5, dil = 2, left = dil * (k - 1) / 2;
  ad::Tape<double> t;
  const auto y = ad::conv1d(t.constant(x), t.constant(w), t.constant(b), k, dil, ad::Padding::same);
  for (int tt = 0; tt < 8; ++tt)
    for (int o = 0; o < 3; ++o) {
      double acc = b(0, o);
      for (int c = 0; c < 2; ++c)
        for (int j = 0; j < k; ++j) {
          const int src = tt - left + j * dil;
          if (src >= 0 && src < 8) acc += w(c * k + j, o) * x(src, c);
        }
      EXPECT_NEAR(y.value()(tt, o), acc, 1e-12);
    }
}

TEST(Autodiff, DepthwiseCausalConvGradientsAndCausality) {
  auto s = store_with({{"x", randn(8, 3, 21)}, {"w", randn(4, 3, 22)}, {"b", randn(1, 3, 23)}});
  const double e = check(s, [](auto& t, auto& st) {
    return project(t, ad::depthwise_causal_conv1d(use(t, st, "x"), use(t, st, "w"), use(t, st, "b")), 24);
  });
  EXPECT_LT(e, 1e-6);

  // Output at t never depends on inputs after t.
  Eigen::MatrixXd x = randn(8, 3, 21);
  ad::Tape<double> t1, t2;
  const auto y1 = ad::depthwise_causal_conv1d(t1.constant(x), t1.constant(randn(4, 3, 22)), t1.constant(randn(1, 3, 23)));
  x.bottomRows(3).setRandom();
  const auto y2 = ad::depthwise_causal_conv1d(t2.constant(x), t2.constant(randn(4, 3, 22)), t2.constant(randn(1, 3, 23)));
  EXPECT_TRUE(y1.value().topRows(5).isApprox(y2.value().topRows(5), 0.0));
}

TEST(Autodiff, Conv2dGradientsAndShape) {
  const int F = 2, H = 5, W = 6;
  auto s = store_with({{"x", randn(F * H * W, 2, 25)}, {"w", randn(2 * 9, 3, 26)}, {"b", randn(1, 3, 27)}});
  for (int stride : {1, 2}) {
    const double e = check(s, [=](auto& t, auto& st) {
      const auto y = ad::conv2d(use(t, st, "x"), use(t, st, "w"), use(t, st, "b"), F, H, W, 3, stride);
      EXPECT_EQ(y.rows(), F * ad::conv2d_out_size(H, 3, stride) * ad::conv2d_out_size(W, 3, stride));
      return project(t, ad::spatial_mean(y, ad::conv2d_out_size(H, 3, stride) * ad::conv2d_out_size(W, 3, stride)),
                     28);
    });
    EXPECT_LT(e, 1e-6) << "stride " << stride;
  }
}

TEST(Autodiff, Conv2dMatchesDirectSum) {
  const int F = 2, H = 6, W = 5, k = 3, st = 2, p = 1, cin = 2, cout = 2;
  const Eigen::MatrixXd x = randn(F * H * W, cin, 29), w = randn(cin * k * k, cout, 30), b = randn(1, cout, 31);
  ad::Tape<double> t;
  const auto y = ad::conv2d(t.constant(x), t.constant(w), t.constant(b), F, H, W, k, st);
  const int ho = ad::conv2d_out_size(H, k, st), wo = ad::conv2d_out_size(W, k, st);
  EXPECT_EQ(ho, 3);
  EXPECT_EQ(wo, 3);
  for (int f = 0; f < F; ++f)
    for (int oy = 0; oy < ho; ++oy)
      for (int ox = 0; ox < wo; ++ox)
        for (int o = 0; o < cout; ++o) {
          double acc = b(0, o);
          for (int c = 0; c < cin; ++c)
            for (int ky = 0; ky < k; ++ky)
              for (int kx = 0; kx < k; ++kx) {
                const int iy = oy * st - p + ky, ix = ox * st - p + kx;
                if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
                acc += w((c * k + ky) * k + kx, o) * x((f * H + iy) * W + ix, c);
              }
          EXPECT_NEAR(y.value()((f * ho + oy) * wo + ox, o), acc, 1e-12);
        }
}

/// Naive per-step recurrence used as the scan oracle.
Eigen::MatrixXd scan_oracle(const Eigen::MatrixXd& u, const Eigen::MatrixXd& delta, const Eigen::MatrixXd& a_log,
                            const Eigen::MatrixXd& b, const Eigen::MatrixXd& c, const Eigen::MatrixXd& d) {
  const int T = u.rows(), E = u.cols(), N = a_log.cols();
  Eigen::MatrixXd h = Eigen::MatrixXd::Zero(E, N), y(T, E);
  for (int t = 0; t < T; ++t)
    for (int e = 0; e < E; ++e) {
      double acc = d(0, e) * u(t, e);
      for (int n = 0; n < N; ++n) {
        h(e, n) = std::exp(-std::exp(a_log(e, n)) * delta(t, e)) * h(e, n) + delta(t, e) * b(t, n) * u(t, e);
        acc += c(t, n) * h(e, n);
      }
      y(t, e) = acc;
    }
  return y;
}

TEST(Autodiff, SelectiveScanMatchesRecurrence) {
  const Eigen::MatrixXd u = randn(7, 3, 32), delta = randn(7, 3, 33).array().abs() * 0.5,
                        a_log = randn(3, 4, 34, 0.5), b = randn(7, 4, 35), c = randn(7, 4, 36), d = randn(1, 3, 37);
  ad::Tape<double> t;
  const auto y = ad::selective_scan(t.constant(u), t.constant(delta), t.constant(a_log), t.constant(b),
                                    t.constant(c), t.constant(d));
  EXPECT_LT((y.value() - scan_oracle(u, delta, a_log, b, c, d)).norm(), 1e-12);
}

TEST(Autodiff, SelectiveScanGradients) {
  auto s = store_with({{"u", randn(6, 3, 38)},
                       {"delta", (randn(6, 3, 39).array().abs() * 0.5 + 0.05).matrix()},
                       {"a_log", randn(3, 4, 40, 0.5)},
                       {"b", randn(6, 4, 41)},
                       {"c", randn(6, 4, 42)},
                       {"d", randn(1, 3, 43)}});
  const double e = check(s, [](auto& t, auto& st) {
    return project(t,
                   ad::selective_scan(use(t, st, "u"), use(t, st, "delta"), use(t, st, "a_log"), use(t, st, "b"),
                                      use(t, st, "c"), use(t, st, "d")),
                   44);
  });
  EXPECT_LT(e, 1e-6);
}

TEST(Autodiff, SoftReconstructAndDistanceCeGradients) {
  const Vec codes = (Vec(4) << -1.5, -0.2, 0.4, 1.3).finished();
  auto s = store_with({{"l", randn(9, 1, 45)}});
  const double e1 = check(s, [&](auto& t, auto& st) { return project(t, ad::soft_reconstruct(use(t, st, "l"), codes, 0.7), 46); });
  EXPECT_LT(e1, 1e-6);
  const std::vector<int> idx{0, 1, 2, 3, 3, 2, 1, 0, 2};
  const double e2 = check(s, [&](auto& t, auto& st) { return ad::distance_ce(use(t, st, "l"), codes, idx); });
  EXPECT_LT(e2, 1e-6);
}

TEST(Autodiff, SoftReconstructEdgeCases) {
  ad::Tape<double> t;
  const Vec two = (Vec(2) << -1.0, 1.0).finished();
  EXPECT_NEAR(ad::soft_reconstruct(t.constant(Eigen::MatrixXd::Zero(1, 1)), two).scalar(), 0.0, 1e-15);
  const Vec far = (Vec(3) << 0.5, 20.0, -20.0).finished();
  EXPECT_NEAR(ad::soft_reconstruct(t.constant(Eigen::MatrixXd::Constant(1, 1, 0.5)), far).scalar(), 0.5, 1e-3);
  // Uniform distances over 1-bit codes: CE = ln 2.
  EXPECT_NEAR(ad::distance_ce(t.constant(Eigen::MatrixXd::Zero(3, 1)), two, {0, 1, 0}).scalar(), std::log(2.0), 1e-12);
}

TEST(Autodiff, LossGradients) {
  Rng rng(47);
  const int T = 96;
  Vec target(T);
  for (int i = 0; i < T; ++i) target[i] = std::sin(2 * M_PI * 1.3 * i / 30.0);
  auto s = store_with({{"p", randn(T, 1, 48)}, {"s", randn(T, 1, 49, 0.3)}});
  const Eigen::MatrixXd label = randn(T, 1, 50);
  const BandBins bins = band_bins(T, 30.0, kPulseBand);
  const int bin = spectral_target_bin(target, bins);
  const std::vector<std::function<Var<double>(ad::Tape<double>&, ParamStore<double>&)>> losses = {
      [&](auto& t, auto& st) { return ad::neg_pearson(use(t, st, "p"), target); },
      [&](auto& t, auto& st) { return ad::spectral_ce(use(t, st, "p"), bin, bins); },
      [&](auto& t, auto& st) { return ad::sq_l2_sum(use(t, st, "p"), label); },
      [&](auto& t, auto& st) { return ad::mse(use(t, st, "p"), label); },
      [&](auto& t, auto& st) { return ad::smooth_l1(use(t, st, "p"), label, 1.0); },
      [&](auto& t, auto& st) { return ad::gaussian_nll(use(t, st, "p"), use(t, st, "s"), label); },
  };
  for (std::size_t i = 0; i < losses.size(); ++i) {
    const auto r = testing::grad_check(s, losses[i]);
    EXPECT_LT(r.rel_error, 1e-5) << "loss " << i;
  }
}

TEST(Autodiff, StraightThroughAndStopGradient) {
  ParamStore<double> s;
  s.add("z", randn(4, 1, 51));
  s.zero_grad();
  ad::Tape<double> t;
  const auto z = use(t, s, "z");
  const Eigen::MatrixXd q = Eigen::MatrixXd::Constant(4, 1, 0.25);
  const auto y = ad::ste(z, q);
  EXPECT_TRUE(y.value().isApprox(q));
  const auto loss = ad::add(ad::sum(y), ad::sum(ad::stop_gradient(ad::scale(z, 3.0))));
  t.backward(loss);
  EXPECT_TRUE(s.get("z").grad.isApprox(Eigen::MatrixXd::Ones(4, 1)));
}

TEST(Autodiff, SquaredL2CommitmentArithmetic) {
  ad::Tape<double> t;
  const auto z = t.constant((Eigen::MatrixXd(2, 1) << 1.0, 2.0).finished());
  EXPECT_DOUBLE_EQ(ad::sq_l2_sum(z, Eigen::MatrixXd(Eigen::MatrixXd::Zero(2, 1))).scalar(), 5.0);
}

TEST(Autodiff, GaussianNllAtUnitVarianceIsHalfMse) {
  ad::Tape<double> t;
  const Eigen::MatrixXd p = randn(10, 1, 52), l = randn(10, 1, 53);
  const auto nll = ad::gaussian_nll(t.constant(p), t.constant(Eigen::MatrixXd::Zero(10, 1)), l);
  EXPECT_NEAR(nll.scalar(), 0.5 * (p - l).squaredNorm() / 10.0, 1e-12);
}

TEST(Autodiff, ShapeErrorsAreRejected) {
  ad::Tape<double> t;
  const auto a = t.constant(Eigen::MatrixXd::Zero(2, 3));
  const auto b = t.constant(Eigen::MatrixXd::Zero(2, 3));
  EXPECT_THROW(ad::matmul(a, b), InvalidArgument);
  EXPECT_THROW(ad::add_row(a, b), InvalidArgument);
  ad::Tape<double> other;
  EXPECT_THROW(ad::add(a, other.constant(Eigen::MatrixXd::Zero(2, 3))), InvalidArgument);
  EXPECT_THROW(t.backward(a), InvalidArgument);
}

TEST(Autodiff, CheckFiniteNamesTheLayer) {
  ad::Tape<double> t;
  const auto a = t.constant(Eigen::MatrixXd::Constant(1, 1, std::nan("")));
  try {
    ad::check_finite(a, "encoder.bimamba");
    FAIL();
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("encoder.bimamba"), std::string::npos);
  }
}

TEST(Autodiff, FloatAndDoubleAgree) {
  const Eigen::MatrixXd x = randn(6, 3, 54), w = randn(3 * 3, 2, 55), b = randn(1, 2, 56);
  ad::Tape<double> td;
  ad::Tape<float> tf;
  const auto yd = ad::gelu(ad::conv1d(td.constant(x), td.constant(w), td.constant(b), 3, 2, ad::Padding::same));
  const auto yf = ad::gelu(ad::conv1d(tf.constant(x.cast<float>()), tf.constant(w.cast<float>()),
                                      tf.constant(b.cast<float>()), 3, 2, ad::Padding::same));
  EXPECT_LT((yd.value() - yf.value().cast<double>()).norm(), 1e-5);
}

}  // namespace
}  // namespace lqrppg
