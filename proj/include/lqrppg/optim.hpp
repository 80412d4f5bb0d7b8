#pragma once

// AdamW with decoupled weight decay and the one-cycle learning-rate schedule.

#include "lqrppg/nn.hpp"

#include <filesystem>
#include <vector>

namespace lqrppg {

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

/// p <- p - lr*wd*p, then the bias-corrected Adam step on p. Moments are kept
/// per parameter in store order; the store must not gain parameters after
/// construction.
template <class S>
class AdamW {
 public:
  AdamW(ParamStore<S>& store, AdamWConfig cfg);

  /// One update with learning rate `lr` from the gradients in the store.
  /// Throws NumericalError naming the parameter on a non-finite gradient.
  void step(double lr);
  void step() { step(cfg_.lr); }

  long steps() const { return t_; }
  const AdamWConfig& config() const { return cfg_; }

  /// Moments and step count, in the checkpoint container format.
  void save_state(const std::filesystem::path& stem) const;
  void load_state(const std::filesystem::path& stem);

 private:
  ParamStore<S>* store_;
  AdamWConfig cfg_;
  std::vector<ad::Mat<S>> m_;
  std::vector<ad::Mat<S>> v_;
  long t_ = 0;
};

/// One-cycle schedule over `total_steps` optimizer steps: cosine warm-up from
/// max_lr/div to max_lr over the first pct_start of the steps, then cosine
/// annealing down to max_lr/(div*final_div).
struct OneCycle {
  double max_lr = 1e-3;
  long total_steps = 1;
  double pct_start = 0.25;
  double div = 25.0;
  double final_div = 1e4;

  void validate() const;
  /// Learning rate for 0-based step index; clamps past the last step.
  double lr(long step) const;
};

}  // namespace lqrppg
