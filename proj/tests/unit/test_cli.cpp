#include "cli.hpp"

#include "lqrppg/errors.hpp"
#include "lqrppg/stage2.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

namespace lqrppg {
namespace {

namespace fs = std::filesystem;
using io::json;

struct Result {
  int code = 0;
  std::string out;
  std::string err;
};

Result run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

// Model settings small enough for second-scale CLI runs.
const std::vector<std::string> kTiny{"--set", "stage2.model.channels=8", "--set", "stage2.model.mamba.d=8",
                                     "--set", "stage2.batch=4",          "--set", "stage1.epochs=1",
                                     "--set", "stage2.epochs=2"};

std::vector<std::string> with_tiny(std::vector<std::string> args) {
  args.insert(args.end(), kTiny.begin(), kTiny.end());
  return args;
}

class Cli : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    root_ = fs::temp_directory_path() / "lqrppg_cli_test";
    fs::remove_all(root_);
    fs::create_directories(root_);
    const Result gen = run({"gen-data", "--out", p("corpus"), "--videos", "10", "--size", "8", "--label-noise", "0.3",
                            "--artifact-prob", "0.2", "--pulse-gain", "2", "--seed", "7"});
    ASSERT_EQ(gen.code, 0) << gen.err;
    const Result lq = run(with_tiny({"train-lq", "--corpus", p("corpus"), "--out", p("lq"), "--max-bits", "5"}));
    ASSERT_EQ(lq.code, 0) << lq.err;
  }
  static void TearDownTestSuite() { fs::remove_all(root_); }

  static std::string p(const std::string& name) { return (root_ / name).string(); }

  static fs::path root_;
};

fs::path Cli::root_;

TEST_F(Cli, HelpAndUsageErrors) {
  EXPECT_EQ(run({"--help"}).code, 0);
  EXPECT_EQ(run({}).code, 2);
  EXPECT_EQ(run({"train-c2f"}).code, 2);  // --corpus is required
  EXPECT_EQ(run({"frobnicate"}).code, 2);
}

TEST_F(Cli, GenDataIsDeterministicAndRecordsKnobs) {
  const json m = io::read_json(p("corpus") + "/manifest.json");
  EXPECT_DOUBLE_EQ(m.at("generator").at("label_noise_std").get<double>(), 0.3);
  EXPECT_DOUBLE_EQ(m.at("generator").at("artifact_burst_prob").get<double>(), 0.2);
  ASSERT_EQ(run({"gen-data", "--out", p("again"), "--videos", "10", "--size", "8", "--label-noise", "0.3",
                 "--artifact-prob", "0.2", "--pulse-gain", "2", "--seed", "7"})
                .code,
            0);
  EXPECT_EQ(cli::tree_hash(p("corpus")), cli::tree_hash(p("again")));
  ASSERT_EQ(run({"gen-data", "--out", p("other"), "--videos", "10", "--size", "8", "--seed", "8"}).code, 0);
  EXPECT_NE(io::read_json(p("other") + "/manifest.json").at("generator").at("seed"), m.at("generator").at("seed"));
}

TEST_F(Cli, GenDataRejections) {
  const Result bad = run({"gen-data", "--out", p("bad"), "--hr-range", "30-300"});
  EXPECT_EQ(bad.code, 2);
  EXPECT_NE(bad.err.find("hr range"), std::string::npos);
  EXPECT_EQ(run({"gen-data", "--out", p("bad2"), "--hr-range", "fast"}).code, 2);
  const Result busy = run({"gen-data", "--out", p("corpus"), "--videos", "4"});
  EXPECT_EQ(busy.code, 2);
  EXPECT_NE(busy.err.find("--force"), std::string::npos);
  EXPECT_EQ(run({"gen-data", "--out", p("unknown"), "--set", "data.colour=1"}).code, 2);
}

TEST_F(Cli, RunDirectoryIsSelfDescribing) {
  for (const char* f : {"config.resolved.json", "run.json", "log.jsonl", "summary.json", "fidelity.svg",
                        "utilization_5bit.svg", "bank", "lq"}) {
    EXPECT_TRUE(fs::exists(root_ / "lq" / f)) << f;
  }
  const json r = io::read_json(p("lq") + "/run.json");
  EXPECT_EQ(r.at("command"), "train-lq");
  EXPECT_EQ(r.at("inputs").at("corpus"), cli::tree_hash(p("corpus")));
  EXPECT_EQ(io::read_json(p("lq") + "/config.resolved.json").at("stage1").at("epochs"), 1);
}

TEST_F(Cli, MissingInputsAreDataErrors) {
  EXPECT_EQ(run(with_tiny({"train-lq", "--corpus", p("nowhere"), "--out", p("x1")})).code, 3);
  EXPECT_EQ(run(with_tiny({"train-c2f", "--corpus", p("corpus"), "--bank", p("nowhere"), "--out", p("x2")})).code, 3);
  EXPECT_EQ(run(with_tiny({"train-c2f", "--corpus", p("corpus"), "--out", p("x3")})).code, 2);  // no bank
}

TEST_F(Cli, MaxBitsAndMaskPlumbing) {
  const Result r = run(with_tiny({"train-c2f", "--corpus", p("corpus"), "--bank", p("lq/bank"), "--out", p("n3"),
                                  "--max-bits", "3", "--supervision-mask", "2,3"}));
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("2 refinement steps"), std::string::npos);
  const C2fModel m = load_c2f(root_ / "n3" / "model");
  EXPECT_EQ(m.cfg.max_bits, 3);
  EXPECT_EQ(m.codebooks.size(), 3u);
  EXPECT_EQ(m.mask, (std::vector<int>{2, 3}));
  EXPECT_EQ(run(with_tiny({"train-c2f", "--corpus", p("corpus"), "--bank", p("lq/bank"), "--out", p("n7"),
                           "--max-bits", "7"}))
                .code,
            2);
}

TEST_F(Cli, ResumeMatchesUninterruptedRun) {
  const auto args = [&](const std::string& out) {
    return with_tiny({"train-c2f", "--corpus", p("corpus"), "--lq-ckpt", p("lq/lq"), "--out", p(out), "--epochs", "3",
                      "--max-bits", "3"});
  };
  ASSERT_EQ(run(args("full")).code, 0);
  auto first = args("split");
  first.insert(first.end(), {"--stop-after", "1"});
  const Result stopped = run(first);
  ASSERT_EQ(stopped.code, 0) << stopped.err;
  EXPECT_NE(stopped.out.find("--resume"), std::string::npos);
  auto second = args("split");
  second.push_back("--resume");
  ASSERT_EQ(run(second).code, 0);
  const double a = io::read_json(p("full") + "/summary.json").at("finalLoss");
  const double b = io::read_json(p("split") + "/summary.json").at("finalLoss");
  EXPECT_NEAR(a, b, 1e-8);
  EXPECT_EQ(cli::tree_hash(p("full") + "/model.bin"), cli::tree_hash(p("split") + "/model.bin"));

  auto changed = args("split");
  changed.insert(changed.end(), {"--resume", "--lambda-ce", "0.5"});
  EXPECT_EQ(run(changed).code, 2);  // config differs from the stored run
}

TEST_F(Cli, EvalGuardsAndComparison) {
  ASSERT_EQ(run(with_tiny({"train-c2f", "--corpus", p("corpus"), "--bank", p("lq/bank"), "--out", p("model"),
                           "--max-bits", "5"}))
                .code,
            0);
  EXPECT_EQ(run({"eval", "--corpus", p("corpus"), "--run", p("model"), "--split", "train"}).code, 2);
  const Result t = run({"eval", "--corpus", p("corpus"), "--run", p("model"), "--split", "train", "--allow-train-eval"});
  EXPECT_EQ(t.code, 0) << t.err;

  const Result ev = run({"eval", "--corpus", p("corpus"), "--run", p("model"), "--baseline", "pos"});
  ASSERT_EQ(ev.code, 0) << ev.err;
  const fs::path dir = root_ / "model" / "eval-test";
  for (const char* f : {"metrics.json", "metrics.csv", "metrics.txt", "scatter.svg", "baseline_pos.json",
                        "compare_pos.json"}) {
    EXPECT_TRUE(fs::exists(dir / f)) << f;
  }
  const json metrics = io::read_json(dir / "metrics.json");
  EXPECT_EQ(metrics.at("perVideo").size(), 2u);
  EXPECT_TRUE(metrics.at("meta").contains("configSha1"));

  const Result self = run({"eval", "--corpus", p("corpus"), "--run", p("model"), "--out", p("self"), "--compare",
                           (dir / "metrics.json").string()});
  ASSERT_EQ(self.code, 0) << self.err;
  const json cmp = io::read_json(p("self") + "/compare.json");
  EXPECT_EQ(cmp.at("win"), 0);
  EXPECT_EQ(cmp.at("tie"), 2);
  EXPECT_TRUE(cmp.at("p").is_null());
}

TEST_F(Cli, EvalDetectsSplitLeakage) {
  ASSERT_EQ(run({"gen-data", "--out", p("reshuffled"), "--videos", "10", "--size", "8", "--label-noise", "0.3",
                 "--artifact-prob", "0.2", "--pulse-gain", "2", "--seed", "7", "--set",
                 "data.split_fractions=[0.2, 0.2, 0.6]"})
                .code,
            0);
  ASSERT_EQ(run(with_tiny({"train-c2f", "--corpus", p("corpus"), "--bank", p("lq/bank"), "--out", p("leak"),
                           "--max-bits", "3"}))
                .code,
            0);
  const Result r = run({"eval", "--corpus", p("reshuffled"), "--run", p("leak")});
  EXPECT_EQ(r.code, 3);
  EXPECT_NE(r.err.find("leakage"), std::string::npos);
}

TEST_F(Cli, SweepShapes) {
  const Result lob = run(with_tiny({"sweep", "--kind", "leave-one-bit", "--corpus", p("corpus"), "--bank",
                                    p("lq/bank"), "--out", p("lob"), "--set", "stage2.epochs=1"}));
  ASSERT_EQ(lob.code, 0) << lob.err;
  const json t = io::read_json(p("lob") + "/sweep.json");
  ASSERT_EQ(t.at("rows").size(), 5u);
  EXPECT_EQ(t.at("rows")[0].at("label"), "{1,2,3,4,5}");
  EXPECT_TRUE(fs::exists(root_ / "lob" / "sweep.svg"));
  EXPECT_TRUE(fs::exists(root_ / "lob" / "children" / "1-2-3-4-5" / "metrics.json"));

  const Result bits = run(with_tiny({"sweep", "--kind", "bits", "--corpus", p("corpus"), "--lq-ckpt", p("lq/lq"),
                                     "--out", p("bits"), "--set", "sweep.bits=[1,2,3,4,5]"}));
  ASSERT_EQ(bits.code, 0) << bits.err;
  for (int b = 1; b <= 5; ++b) {
    EXPECT_TRUE(fs::exists(root_ / "bits" / ("utilization_" + std::to_string(b) + "bit.svg"))) << b;
  }
  EXPECT_EQ(io::read_json(p("bits") + "/fidelity.json").size(), 5u);

  EXPECT_EQ(run({"sweep", "--kind", "depth", "--corpus", p("corpus"), "--out", p("x")}).code, 2);
  EXPECT_EQ(run({"sweep", "--corpus", p("corpus"), "--out", p("x")}).code, 2);
}

TEST(CliHelpers, TruncateBankKeepsLeadingLevels) {
  PseudoLabelBank b;
  b.max_bits = 3;
  b.codebooks = {Vec::Zero(2), Vec::Zero(4), Vec::Zero(8)};
  b.codebook_hashes = {"a", "b", "c"};
  PseudoLabelRecord rec;
  rec.y_n = {Vec::Zero(4), Vec::Ones(4), Vec::Constant(4, 2.0)};
  rec.i_n = {{0, 0, 0, 0}, {1, 1, 1, 1}, {2, 2, 2, 2}};
  b.records.push_back(rec);
  const PseudoLabelBank t = cli::truncate_bank(b, 2);
  EXPECT_EQ(t.max_bits, 2);
  EXPECT_EQ(t.codebooks.size(), 2u);
  EXPECT_EQ(t.codebook_hashes, (std::vector<std::string>{"a", "b"}));
  EXPECT_EQ(t.records[0].y_n.size(), 2u);
  EXPECT_EQ(t.records[0].i_n[1][0], 1);
  EXPECT_THROW(cli::truncate_bank(b, 4), InvalidArgument);
}

TEST(CliHelpers, TreeHashTracksContent) {
  const fs::path d = fs::temp_directory_path() / "lqrppg_tree_hash_test";
  fs::remove_all(d);
  fs::create_directories(d / "sub");
  std::ofstream(d / "a.txt") << "alpha";
  std::ofstream(d / "sub" / "b.txt") << "beta";
  const std::string h1 = cli::tree_hash(d);
  EXPECT_EQ(h1, cli::tree_hash(d));
  EXPECT_EQ(cli::tree_hash(d / "a.txt"), "7e74e68b2a782a3aead46d987a63ca1c91091c13");  // git hash-object
  std::ofstream(d / "sub" / "b.txt") << "!";
  EXPECT_NE(h1, cli::tree_hash(d));
  EXPECT_THROW(cli::tree_hash(d / "missing"), DataError);
  fs::remove_all(d);
}

}  // namespace
}  // namespace lqrppg
