#include "lqrppg/codebook.hpp"
#include "lqrppg/errors.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <numbers>
#include <random>

namespace lqrppg {
namespace {

namespace fs = std::filesystem;

Vec vec(std::initializer_list<double> v) {
  Vec out(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) out[i++] = x;
  return out;
}

Vec tone(int n, double hz, double fs = 30.0) {
  Vec x(n);
  for (int t = 0; t < n; ++t) x[t] = std::sin(2.0 * std::numbers::pi * hz * t / fs);
  return x;
}

TEST(AssignCodes, NearestNeighbour) {
  const Assignment a = assign_codes(vec({-0.9, 0.2, 2.0}), vec({-1.0, 1.0}));
  EXPECT_EQ(a.indices, (std::vector<int>{0, 1, 1}));  // 0-based
  EXPECT_EQ(a.quantized, vec({-1.0, 1.0, 1.0}));
}

TEST(AssignCodes, TieGoesToSmallerIndex) {
  EXPECT_EQ(assign_codes(vec({1.0}), vec({0.0, 2.0})).indices, std::vector<int>{0});
  EXPECT_EQ(assign_codes(vec({1.0}), vec({2.0, 0.0})).indices, std::vector<int>{0});
}

TEST(AssignCodes, RejectsNonFinite) {
  EXPECT_THROW(assign_codes(vec({0.0, NAN}), vec({0.0, 1.0})), InvalidArgument);
}

TEST(AssignCodes, MinimizesDistortionExhaustively) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n01;
  for (int bits : {1, 2}) {
    const int k = 1 << bits;
    for (int trial = 0; trial < 20; ++trial) {
      Vec codes(k), z(6);
      for (auto& c : codes) c = n01(rng);
      for (auto& v : z) v = n01(rng);
      const Assignment a = assign_codes(z, codes);
      const double ours = (z - a.quantized).cwiseAbs().sum();
      // Every index choice over 6 steps.
      int combos = 1;
      for (int t = 0; t < 6; ++t) combos *= k;
      for (int m = 0; m < combos; ++m) {
        double other = 0.0;
        int rest = m;
        for (int t = 0; t < 6; ++t, rest /= k) other += std::abs(z[t] - codes[rest % k]);
        ASSERT_LE(ours, other + 1e-12);
      }
      for (int t = 0; t < 6; ++t) EXPECT_EQ(a.quantized[t], codes[a.indices[t]]);
    }
  }
}

TEST(AssignCodes, OneBitSquareWaveKeepsFundamental) {
  const Vec z = tone(300, 1.3);
  Codebook cb = Codebook::from_quantiles(1, z, 0.9);
  for (int i = 0; i < 200; ++i) ema_update(cb, z, assign_codes(z, cb));
  const Assignment a = assign_codes(z, cb);
  EXPECT_EQ(std::set<double>(a.quantized.begin(), a.quantized.end()).size(), 2u);
  EXPECT_EQ(psd_welch(a.quantized, 30.0).argmax_in(kPulseBand), psd_welch(z, 30.0).argmax_in(kPulseBand));
}

TEST(AssignCodes, PseudoLabelFundamentalPreservedAtAllBitDepths) {
  for (double hz : {0.9, 1.5, 2.2}) {
    const Vec y = zscore(tone(160, hz));
    const auto ref = psd_welch(y, 30.0).argmax_in(kPulseBand);
    for (int bits = 1; bits <= 6; ++bits) {
      const Codebook cb = Codebook::from_quantiles(bits, y);
      EXPECT_EQ(psd_welch(assign_codes(y, cb).quantized, 30.0).argmax_in(kPulseBand), ref)
          << hz << " Hz, " << bits << " bits";
    }
  }
}

TEST(EmaUpdate, ZeroDecayGivesBatchMean) {
  Codebook cb = Codebook::from_codes(1, vec({0.0, 3.0}), 0.0);
  const Vec z = vec({0.4, 0.6, 2.0, 5.0});
  ema_update(cb, z, assign_codes(z, cb));
  EXPECT_NEAR(cb.codes[0], 0.5, 1e-5);
  EXPECT_NEAR(cb.codes[1], 3.5, 1e-5);
}

TEST(EmaUpdate, ZeroDecayMatchesBruteForceClusterMeans) {
  std::mt19937_64 rng(8);
  std::normal_distribution<double> n01;
  Vec z(200);
  for (auto& v : z) v = 2.0 * n01(rng);
  Codebook cb = Codebook::from_codes(2, vec({-2.0, -0.5, 0.5, 2.0}), 0.0, 1e-12);
  const Assignment a = assign_codes(z, cb);
  ema_update(cb, z, a);
  for (int k = 0; k < 4; ++k) {
    double s = 0.0;
    int n = 0;
    for (int t = 0; t < 200; ++t) {
      if (a.indices[t] == k) {
        s += z[t];
        ++n;
      }
    }
    ASSERT_GT(n, 0);
    EXPECT_NEAR(cb.codes[k], s / n, 1e-9);
  }
}

TEST(EmaUpdate, UnusedCodeStaysPut) {
  Codebook cb = Codebook::from_codes(1, vec({0.0, 10.0}), 0.99);
  const Vec z = vec({0.1, -0.2, 0.3});
  for (int i = 0; i < 50; ++i) ema_update(cb, z, assign_codes(z, cb));
  // The idle code's sum and count decay together, leaving only the smoothing drift.
  EXPECT_NEAR(cb.codes[1], 10.0, 1e-3);
}

TEST(EmaUpdate, ConvergesToKMeansFixedPoint) {
  std::mt19937_64 rng(21);
  std::normal_distribution<double> n01;
  Vec z(400);
  for (Eigen::Index i = 0; i < z.size(); ++i) z[i] = (i % 2 ? 2.0 : -1.5) + 0.4 * n01(rng);

  // Offline Lloyd iterations on the same data.
  Vec lloyd = vec({-0.1, 0.1});
  for (int it = 0; it < 100; ++it) {
    const Assignment a = assign_codes(z, lloyd);
    Vec s = Vec::Zero(2), n = Vec::Zero(2);
    for (Eigen::Index t = 0; t < z.size(); ++t) {
      s[a.indices[t]] += z[t];
      n[a.indices[t]] += 1.0;
    }
    lloyd = s.cwiseQuotient(n);
  }

  Codebook cb = Codebook::from_codes(1, vec({-0.1, 0.1}), 0.99);
  for (int it = 0; it < 500; ++it) ema_update(cb, z, assign_codes(z, cb));
  EXPECT_NEAR(cb.codes[0], lloyd[0], 1e-3);
  EXPECT_NEAR(cb.codes[1], lloyd[1], 1e-3);
}

TEST(UniformQuantize, Examples) {
  const Assignment a = uniform_quantize(vec({-0.7, 0.3}), 1, -1.0, 1.0);
  EXPECT_EQ(uniform_codes(1, -1.0, 1.0), vec({-0.5, 0.5}));
  EXPECT_EQ(a.quantized, vec({-0.5, 0.5}));
  EXPECT_EQ(uniform_quantize(vec({-2.0}), 2, -2.0, 2.0).quantized, vec({-1.5}));
  EXPECT_EQ(uniform_quantize(vec({-9.0, 9.0}), 2, -2.0, 2.0).indices, (std::vector<int>{0, 3}));
  EXPECT_THROW(uniform_quantize(vec({0.0}), 0), InvalidArgument);
}

TEST(UniformQuantize, MatchesLearnableWithSameCodes) {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n01;
  Vec y(500);
  for (auto& v : y) v = 1.7 * n01(rng);
  y[0] = 0.0;   // bin edge at 3 bits over [-3, 3]
  y[1] = 0.75;  // another interior edge
  for (int bits = 1; bits <= 6; ++bits) {
    const Assignment u = uniform_quantize(y, bits);
    const Assignment l = assign_codes(y.cwiseMax(-3.0).cwiseMin(3.0), uniform_codes(bits));
    EXPECT_EQ(u.indices, l.indices) << bits;
    EXPECT_EQ(u.quantized, l.quantized) << bits;
  }
}

TEST(Utilization, Examples) {
  Assignment all_first{{0, 0, 0}, vec({1, 1, 1})};
  EXPECT_EQ(utilization({all_first}, 2), vec({1.0, 0.0}));

  const Vec square = tone(300, 1.0).unaryExpr([](double v) { return v >= 0 ? 1.0 : -1.0; });
  const Vec u = utilization({assign_codes(square, vec({-1.0, 1.0}))}, 2);
  EXPECT_NEAR(u[0], 0.5, 0.02);
  EXPECT_NEAR(u.sum(), 1.0, 1e-9);
  EXPECT_THROW(utilization({}, 2), InvalidArgument);
}

TEST(LabelFidelity, IdenticalIsZeroAndFinerIsNoWorse) {
  std::vector<PulseTrace> truth, q1, q5;
  for (double hz : {0.95, 1.2, 1.65, 2.1}) {
    Vec y = zscore(Vec(tone(160, hz) + 0.6 * tone(160, 2.0 * hz + 0.1)));
    truth.emplace_back(y, 30.0);
    q1.emplace_back(assign_codes(y, Codebook::from_quantiles(1, y)).quantized, 30.0);
    q5.emplace_back(assign_codes(y, Codebook::from_quantiles(5, y)).quantized, 30.0);
  }
  EXPECT_EQ(label_fidelity_mae(truth, truth), 0.0);
  EXPECT_GE(label_fidelity_mae(q1, truth), label_fidelity_mae(q5, truth));
  EXPECT_THROW(label_fidelity_mae(q1, {truth.front()}), InvalidArgument);
}

TEST(CodebookTest, QuantileInitAndValidation) {
  const Vec s = Vec::LinSpaced(1000, 0.0, 1.0);
  const Codebook cb = Codebook::from_quantiles(2, s);
  EXPECT_NEAR(cb.codes[0], 0.125, 2e-3);
  EXPECT_NEAR(cb.codes[3], 0.875, 2e-3);
  EXPECT_THROW(Codebook::from_codes(2, vec({0, 1, 2})), InvalidArgument);
  EXPECT_THROW(Codebook::from_codes(1, vec({0, NAN})), InvalidArgument);
  EXPECT_THROW(Codebook::from_codes(1, vec({0, 1}), 1.0), InvalidArgument);
}

TEST(CodebookTest, SaveLoadRoundTripAndCorruption) {
  const fs::path dir = fs::temp_directory_path() / "lqrppg_codebook";
  fs::remove_all(dir);
  fs::create_directories(dir);
  Codebook cb = Codebook::from_codes(2, vec({-1.25, -0.1, 0.3, 2.0}), 0.95, 1e-4);
  const Vec z = vec({-1.0, 0.0, 0.5, 1.7, 2.2});
  ema_update(cb, z, assign_codes(z, cb));
  save_codebook(cb, dir / "cb");
  const Codebook back = load_codebook(dir / "cb");
  EXPECT_EQ(back.codes, cb.codes);
  EXPECT_EQ(back.ema_count, cb.ema_count);
  EXPECT_EQ(back.ema_sum, cb.ema_sum);
  EXPECT_EQ(back.decay, cb.decay);
  EXPECT_EQ(back.eps, cb.eps);
  EXPECT_EQ(codebook_hash(back), codebook_hash(cb));
  EXPECT_EQ(codebook_hash(cb).size(), 40u);

  fs::resize_file(dir / "cb.bin", fs::file_size(dir / "cb.bin") - 3);
  EXPECT_THROW(load_codebook(dir / "cb"), DataError);
  EXPECT_THROW(load_codebook(dir / "missing"), DataError);
}

}  // namespace
}  // namespace lqrppg
