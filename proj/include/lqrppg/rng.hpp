#pragma once

#include <cstdint>
#include <random>

namespace lqrppg {

/// Engine used for every random draw (data, initialization, shuffling).
using Rng = std::mt19937_64;

/// Deterministic per-component seed (splitmix64 of master and salt).
std::uint64_t derive_seed(std::uint64_t master, std::uint64_t salt);

}  // namespace lqrppg
