#pragma once

// Run configuration: one TOML file with sections {data, stage1, stage2, eval,
// sweep}, layered as defaults < file < environment < command-line overrides.
// Every layer is checked against the default document, so unknown keys and
// type mismatches are rejected before anything runs. The merged document is
// the resolved config written to the run directory.

#include "lqrppg/datagen.hpp"
#include "lqrppg/stage1.hpp"
#include "lqrppg/stage2.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace lqrppg {

struct EvalSection {
  Split split = Split::test;
  bool hrv = false;
  std::string baseline;  // empty, "green", "chrom" or "pos"
};

struct SweepSection {
  std::string kind;
  std::vector<int> bits{1, 2, 3, 4, 5, 6};
  std::vector<int> max_bits{2, 3, 4, 5, 6};
  std::vector<double> lambda_ce{0.1, 0.5, 1.0, 1.5, 2.0};
  std::vector<std::uint64_t> seeds{100, 200, 300};
  std::vector<std::string> variants{"raw", "bpf", "quant", "quantCls", "bpfQuant", "bpfQuantCls"};
};

inline const std::vector<std::string> kSweepKinds{"bits", "progressive", "leave-one-bit", "max-bits", "lambda-ce",
                                                  "supervision"};

/// Per-component seeds expanded from the master seed, so runs that change one
/// factor keep every other stream fixed.
struct SeedPlan {
  std::uint64_t data = 0;
  std::uint64_t lq_init = 0;
  std::uint64_t lq_shuffle = 0;
  std::uint64_t c2f_init = 0;
  std::uint64_t c2f_shuffle = 0;

  static SeedPlan from_master(std::uint64_t master);
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::string run_root = "runs";
  GenConfig data;  // data.seed comes from the seed plan
  LqEncoderCfg encoder;
  int lq_max_bits = 5;
  Stage1Cfg stage1;
  C2fCfg model;
  Stage2Cfg stage2;
  EvalSection eval;
  SweepSection sweep;

  SeedPlan seeds() const { return SeedPlan::from_master(seed); }
};

/// The default document (every accepted key with its default value).
io::json default_config_json();

/// Recursively overlays `patch` on `base`. Keys absent from `base` and values
/// whose JSON type differs from the base value (integers are accepted for
/// floating point entries) raise ConfigError naming the dotted key.
void merge_config(io::json& base, const io::json& patch, const std::string& origin);

/// TOML text / file to JSON. Parse errors raise ConfigError.
io::json toml_to_json(const std::string& text, const std::string& origin);
io::json read_toml(const std::filesystem::path& path);

/// Overrides from the environment. LQRPPG_SEED and LQRPPG_RUN_ROOT set the
/// top-level keys; LQRPPG_<SECTION>__<KEY>[__<KEY>...] sets nested keys
/// (lower-cased). Values are parsed as TOML values, falling back to a string.
io::json env_overrides(const std::map<std::string, std::string>& env);
std::map<std::string, std::string> current_environment();

/// Sets one dotted key ("stage2.epochs") in a patch document.
void set_dotted(io::json& patch, const std::string& dotted, io::json value);

/// Builds and validates the typed configuration. Schema or range violations
/// raise ConfigError.
RunConfig run_config_from_json(const io::json& resolved);

/// Layers defaults, the optional file, the environment and `cli_patch`.
io::json resolve_config(const std::filesystem::path& file, const std::map<std::string, std::string>& env,
                        const io::json& cli_patch);

}  // namespace lqrppg
