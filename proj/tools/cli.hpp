#pragma once

// The lqrppg command line: gen-data, train-lq, train-c2f, train-e2e, eval and
// sweep. Exit codes: 0 success, 2 config error, 3 data error, 4 numerical
// failure, 1 anything else.

#include "lqrppg/stage1.hpp"

#include <filesystem>
#include <ostream>
#include <string>
#include <vector>

namespace lqrppg::cli {

/// `args` excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Bank restricted to levels 1..max_bits (levels are trained independently, so
/// the shallower bank equals one exported from a max_bits-level module).
PseudoLabelBank truncate_bank(const PseudoLabelBank& bank, int max_bits);

/// SHA-1 over the sorted "<relative path> <blob sha1>" lines of every regular
/// file below `dir` (or the blob hash of a single file).
std::string tree_hash(const std::filesystem::path& path);

}  // namespace lqrppg::cli
