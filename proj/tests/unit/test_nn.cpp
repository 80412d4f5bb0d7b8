#include "lqrppg/errors.hpp"
#include "lqrppg/nn.hpp"

#include "support/gradcheck.hpp"

#include <gtest/gtest.h>

#include <filesystem>

namespace lqrppg {
namespace {

namespace fs = std::filesystem;
using ad::Tape;
using ad::Var;
using Mat = Eigen::MatrixXd;
using testing::grad_check;

// Random fixed projection turns any output into a scalar loss with a
// non-degenerate upstream gradient.
Var<double> project(const Var<double>& y, std::uint64_t seed = 99) {
  Rng rng(seed);
  Tape<double>& tape = *y.tape;
  return ad::sum(ad::mul(y, tape.constant(gaussian(y.rows(), y.cols(), 1.0, rng))));
}

Var<double> run_forward(const DilatedConvBlock& block, ParamStore<double>& store, const Mat& x) {
  Tape<double> tape;
  return block.forward(tape, store, tape.constant(x));
}

TEST(DilatedBlock, ReceptiveFieldDefault) {
  EXPECT_EQ(DilatedBlockCfg{}.receptive_field(), 125);
  DilatedBlockCfg bad;
  bad.dilations = {1, 2};
  EXPECT_THROW(bad.validate(), InvalidArgument);
}

TEST(DilatedBlock, ZeroWeightsGiveZeroOutput) {
  const DilatedConvBlock block{"enc", {}};
  ParamStore<double> store;
  Rng rng(0);
  block.init(store, rng, DilatedInit::zero);
  Tape<double> tape;
  Rng xr(1);
  const Var<double> y = block.forward(tape, store, tape.constant(gaussian(40, 1, 1.0, xr)));
  EXPECT_EQ(y.value().cwiseAbs().maxCoeff(), 0.0);
}

TEST(DilatedBlock, SingleLayerDeltaKernelIsIdentity) {
  DilatedBlockCfg cfg;
  cfg.layers = 1;
  cfg.dilations = {1};
  const DilatedConvBlock block{"enc", cfg};
  ParamStore<double> store;
  Rng rng(0);
  block.init(store, rng, DilatedInit::identity);
  Rng xr(2);
  const Mat x = gaussian(30, 1, 1.0, xr);
  Tape<double> tape;
  EXPECT_EQ(block.forward(tape, store, tape.constant(x)).value(), x);
}

TEST(DilatedBlock, IdentityPairInitReproducesInput) {
  const DilatedConvBlock block{"enc", {}};
  ParamStore<double> store;
  Rng rng(0);
  block.init(store, rng, DilatedInit::identity);
  Rng xr(3);
  const Mat x = gaussian(160, 1, 1.5, xr);
  Tape<double> tape;
  EXPECT_LT((block.forward(tape, store, tape.constant(x)).value() - x).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(DilatedBlock, PreservesLength) {
  const DilatedConvBlock block{"enc", {}};
  ParamStore<double> store;
  Rng rng(4);
  block.init(store, rng);
  for (int T : {1, 7, 160}) {
    Tape<double> tape;
    EXPECT_EQ(block.forward(tape, store, tape.constant(Mat::Ones(T, 1))).rows(), T);
  }
}

TEST(DilatedBlock, GradientMatchesFiniteDifferences) {
  DilatedBlockCfg cfg;
  cfg.layers = 3;
  cfg.kernel = 3;
  cfg.dilations = {1, 2, 4};
  cfg.hidden = 4;
  const DilatedConvBlock block{"enc", cfg};
  ParamStore<double> store;
  Rng rng(5);
  block.init(store, rng);
  store.add("x", gaussian(8, 1, 1.0, rng));  // input as a leaf to check d loss / d x too
  const auto r = grad_check(store, [&](Tape<double>& tape, ParamStore<double>& s) {
    return project(block.forward(tape, s, use(tape, s, "x")));
  });
  EXPECT_LT(r.rel_error, 1e-3) << r.worst;
}

// ---------------------------------------------------------------------------

TEST(BiMambaTest, ZeroOutputIsResidualIdentity) {
  for (int d : {1, 2, 8}) {
    const BiMamba block{"m", BiMambaCfg{d, 4, 3, 2, false}};
    ParamStore<double> store;
    Rng rng(6);
    block.init(store, rng);
    block.zero_output(store);
    const Mat x = gaussian(12, d, 1.0, rng);
    Tape<double> tape;
    EXPECT_LT((block.forward(tape, store, tape.constant(x)).value() - x).cwiseAbs().maxCoeff(), 1e-12) << d;
  }
}

TEST(BiMambaTest, TiedDirectionsAreTimeReversalEquivariant) {
  const BiMamba block{"m", BiMambaCfg{3, 8, 4, 2, true}};
  ParamStore<double> store;
  Rng rng(7);
  block.init(store, rng);
  EXPECT_FALSE(store.contains("m.bwd.in_x"));
  const Mat x = gaussian(20, 3, 1.0, rng);
  const Mat xr = x.colwise().reverse();
  Tape<double> tape;
  const Mat a = block.bidir(tape, store, tape.constant(x)).value();
  const Mat b = block.bidir(tape, store, tape.constant(xr)).value();
  EXPECT_LT((Mat(a.colwise().reverse()) - b).cwiseAbs().maxCoeff(), 1e-6);
  // Untied directions break the symmetry.
  const BiMamba untied{"u", BiMambaCfg{3, 8, 4, 2, false}};
  untied.init(store, rng);
  const Mat c = untied.bidir(tape, store, tape.constant(x)).value();
  const Mat e = untied.bidir(tape, store, tape.constant(xr)).value();
  EXPECT_GT((Mat(c.colwise().reverse()) - e).cwiseAbs().maxCoeff(), 1e-3);
}

TEST(BiMambaTest, GradientMatchesFiniteDifferences) {
  const BiMamba block{"m", BiMambaCfg{2, 4, 3, 2, false}};
  ParamStore<double> store;
  Rng rng(8);
  block.init(store, rng);
  store.add("x", gaussian(6, 2, 1.0, rng));
  const auto r = grad_check(store, [&](Tape<double>& tape, ParamStore<double>& s) {
    return project(block.forward(tape, s, use(tape, s, "x")));
  });
  EXPECT_LT(r.rel_error, 1e-3) << r.worst << " " << r.worst_error;
}

TEST(BiMambaTest, SingleFeatureGradientMatchesFiniteDifferences) {
  const BiMamba block{"m", BiMambaCfg{1, 4, 5, 2, false}};
  ParamStore<double> store;
  Rng rng(9);
  block.init(store, rng);
  store.add("x", gaussian(10, 1, 1.0, rng));
  const auto r = grad_check(store, [&](Tape<double>& tape, ParamStore<double>& s) {
    return project(block.forward(tape, s, use(tape, s, "x")));
  });
  EXPECT_LT(r.rel_error, 1e-3) << r.worst << " " << r.worst_error;
}

TEST(BiMambaTest, InitFollowsStateSpaceConventions) {
  const BiMamba block{"m", BiMambaCfg{64, 16, 5, 2, false}};
  ParamStore<float> store;
  Rng rng(10);
  block.init(store, rng);
  const auto& a_log = store.get("m.fwd.A_log").value;
  EXPECT_EQ(a_log.rows(), 128);
  EXPECT_EQ(a_log.cols(), 16);
  EXPECT_FLOAT_EQ(std::exp(a_log(5, 3)), 4.0f);
  EXPECT_EQ(store.get("m.fwd.x_dt").value.cols(), 4);  // ceil(64 / 16)
  const Eigen::ArrayXXf dt = (store.get("m.bwd.dt_b").value.array().exp() + 1.0f).log();
  EXPECT_GE(dt.minCoeff(), 0.99e-3f);
  EXPECT_LE(dt.maxCoeff(), 0.101f);
  EXPECT_TRUE((store.get("m.fwd.D").value.array() == 1.0f).all());
}

TEST(BiMambaTest, PreservesShape) {
  const BiMamba block{"m", BiMambaCfg{1, 16, 5, 2, false}};
  ParamStore<double> store;
  Rng rng(11);
  block.init(store, rng);
  Tape<double> tape;
  const Var<double> y = block.forward(tape, store, tape.constant(gaussian(160, 1, 1.0, rng)));
  EXPECT_EQ(y.rows(), 160);
  EXPECT_EQ(y.cols(), 1);
  EXPECT_THROW(block.forward(tape, store, tape.constant(Mat::Ones(5, 2))), InvalidArgument);
}

// ---------------------------------------------------------------------------

TEST(Blocks, LinearAndConvGradients) {
  const Linear lin{"lin", 3, 2, true};
  const Conv1d conv{"conv", 2, 3, 3, 2, ad::Padding::same};
  ParamStore<double> store;
  Rng rng(12);
  lin.init(store, rng);
  conv.init(store, rng);
  store.add("x", gaussian(9, 3, 1.0, rng));
  const auto r = grad_check(store, [&](Tape<double>& tape, ParamStore<double>& s) {
    return project(conv.forward(tape, s, ad::gelu(lin.forward(tape, s, use(tape, s, "x")))));
  });
  EXPECT_LT(r.rel_error, 1e-3) << r.worst;
}

TEST(Blocks, StemPiecesGradients) {
  const Conv2d c1{"c1", 3, 4, 3, 2};
  const ChannelNorm n1{"n1", 4};
  ParamStore<double> store;
  Rng rng(13);
  c1.init(store, rng);
  n1.init(store);
  store.add("x", gaussian(2 * 5 * 5, 3, 1.0, rng));
  const auto r = grad_check(store, [&](Tape<double>& tape, ParamStore<double>& s) {
    const Var<double> h = n1.forward(tape, s, c1.forward(tape, s, use(tape, s, "x"), 2, 5, 5));
    return project(ad::spatial_mean(ad::gelu(h), 9));
  });
  EXPECT_LT(r.rel_error, 1e-3) << r.worst;
}

TEST(Blocks, SoftReconstructIsConvexCombination) {
  Rng rng(14);
  Vec codes(8);
  for (auto& c : codes) c = std::normal_distribution<double>(0.0, 2.0)(rng);
  Tape<double> tape;
  const Var<double> out = ad::soft_reconstruct(tape.constant(gaussian(200, 1, 4.0, rng)), codes);
  EXPECT_GE(out.value().minCoeff(), codes.minCoeff());
  EXPECT_LE(out.value().maxCoeff(), codes.maxCoeff());
}

TEST(Blocks, SoftReconstructGradient) {
  ParamStore<double> store;
  Rng rng(15);
  store.add("l", gaussian(7, 1, 1.0, rng));
  Vec codes(4);
  codes << -1.5, -0.3, 0.4, 1.2;
  const auto r = grad_check(store, [&](Tape<double>& tape, ParamStore<double>& s) {
    return project(ad::soft_reconstruct(use(tape, s, "l"), codes));
  });
  EXPECT_LT(r.rel_error, 1e-3);
}

TEST(PositionalEncodingTest, ShapeAndNormBound) {
  const PositionalEncoding pe{"pe", 160, 64};
  int within = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    ParamStore<double> store;
    Rng rng(seed);
    pe.init(store, rng);
    const Mat& v = store.get("pe").value;
    ASSERT_EQ(v.rows(), 160);
    ASSERT_EQ(v.cols(), 64);
    within += v.norm() <= 0.05 * std::sqrt(160.0 * 64.0);
  }
  EXPECT_GE(within, 99);
  ParamStore<double> store;
  Rng rng(0);
  pe.init(store, rng);
  Tape<double> tape;
  EXPECT_EQ(pe.forward(tape, store, 160, 64).rows(), 160);
  EXPECT_THROW(pe.forward(tape, store, 128, 64), InvalidArgument);
}

TEST(ParamCount, Examples) {
  ParamStore<float> store;
  EXPECT_EQ(param_count(store), 0u);
  Rng rng(0);
  Linear{"head", 64, 1, true}.init(store, rng);
  EXPECT_EQ(param_count(store), 65u);
}

TEST(ParamStoreTest, DuplicateAndMissingNames) {
  ParamStore<float> store;
  store.add("a", ad::Mat<float>::Zero(2, 2));
  EXPECT_THROW(store.add("a", ad::Mat<float>::Zero(1, 1)), InvalidArgument);
  EXPECT_THROW(store.get("b"), InvalidArgument);
}

TEST(ParamStoreTest, FloatAndDoubleInitsAgree) {
  const BiMamba block{"m", BiMambaCfg{2, 4, 3, 2, false}};
  ParamStore<float> f;
  ParamStore<double> d;
  Rng r1(3), r2(3);
  block.init(f, r1);
  block.init(d, r2);
  for (std::size_t i = 0; i < f.size(); ++i) {
    EXPECT_EQ(f.at(i).value, d.at(i).value.cast<float>()) << f.at(i).name;
  }
}

TEST(Checkpoint, RoundTripAndCorruption) {
  const fs::path dir = fs::temp_directory_path() / "lqrppg_nn_ckpt";
  fs::remove_all(dir);
  fs::create_directories(dir);
  ParamStore<float> store;
  Rng rng(16);
  DilatedConvBlock{"enc", {}}.init(store, rng);
  BiMamba{"m", BiMambaCfg{}}.init(store, rng);
  save_params(store, dir / "model", io::json{{"bits", 3}});
  io::json meta;
  const ParamStore<float> back = load_params<float>(dir / "model", &meta);
  EXPECT_EQ(meta.at("bits"), 3);
  ASSERT_EQ(back.size(), store.size());
  for (std::size_t i = 0; i < store.size(); ++i) {
    EXPECT_EQ(back.at(i).name, store.at(i).name);
    EXPECT_EQ(back.at(i).value, store.at(i).value);
  }

  ParamStore<float> target;
  Rng other(17);
  DilatedConvBlock{"enc", {}}.init(target, other);
  BiMamba{"m", BiMambaCfg{}}.init(target, other);
  assign_params(target, back);
  EXPECT_EQ(target.get("m.fwd.out").value, store.get("m.fwd.out").value);

  ParamStore<float> wrong;
  wrong.add("enc.conv0.w", ad::Mat<float>::Zero(3, 3));
  EXPECT_THROW(assign_params(wrong, back), InvalidArgument);

  fs::resize_file(dir / "model.bin", fs::file_size(dir / "model.bin") - 4);
  EXPECT_THROW(load_params<float>(dir / "model"), DataError);
  EXPECT_THROW(load_params<float>(dir / "absent"), DataError);
}

}  // namespace
}  // namespace lqrppg
