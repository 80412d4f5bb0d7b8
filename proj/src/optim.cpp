#include "lqrppg/optim.hpp"

#include "lqrppg/errors.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace lqrppg {

template <class S>
AdamW<S>::AdamW(ParamStore<S>& store, AdamWConfig cfg) : store_(&store), cfg_(cfg) {
  require(cfg.lr >= 0.0 && cfg.weight_decay >= 0.0 && cfg.eps > 0.0, "adamw: bad hyperparameters");
  require(cfg.beta1 >= 0.0 && cfg.beta1 < 1.0 && cfg.beta2 >= 0.0 && cfg.beta2 < 1.0, "adamw: betas must be in [0, 1)");
  for (std::size_t i = 0; i < store.size(); ++i) {
    const auto& p = store.at(i).value;
    m_.push_back(ad::Mat<S>::Zero(p.rows(), p.cols()));
    v_.push_back(ad::Mat<S>::Zero(p.rows(), p.cols()));
  }
}

template <class S>
void AdamW<S>::step(double lr) {
  require(store_->size() == m_.size(), "adamw: parameter store changed after construction");
  ++t_;
  const double b1 = cfg_.beta1, b2 = cfg_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  const S step_size = static_cast<S>(lr / c1);
  const S sqrt_c2 = static_cast<S>(std::sqrt(c2));
  const S eps = static_cast<S>(cfg_.eps);
  for (std::size_t i = 0; i < store_->size(); ++i) {
    ad::Parameter<S>& p = store_->at(i);
    if (p.grad.size() == 0) continue;  // never touched by a tape
    if (!p.grad.allFinite()) throw NumericalError("adamw: non-finite gradient in " + p.name);
    if (cfg_.weight_decay > 0.0) p.value *= static_cast<S>(1.0 - lr * cfg_.weight_decay);
    m_[i] = static_cast<S>(b1) * m_[i] + static_cast<S>(1.0 - b1) * p.grad;
    v_[i] = static_cast<S>(b2) * v_[i] + static_cast<S>(1.0 - b2) * p.grad.cwiseAbs2();
    p.value.array() -= step_size * m_[i].array() / (v_[i].array().sqrt() / sqrt_c2 + eps);
  }
}

template <class S>
void AdamW<S>::save_state(const std::filesystem::path& stem) const {
  ParamStore<S> state;
  for (std::size_t i = 0; i < m_.size(); ++i) {
    state.add("m." + store_->at(i).name, m_[i]);
    state.add("v." + store_->at(i).name, v_[i]);
  }
  save_params(state, stem, io::json{{"step", t_}});
}

template <class S>
void AdamW<S>::load_state(const std::filesystem::path& stem) {
  io::json meta;
  const ParamStore<S> state = load_params<S>(stem, &meta);
  if (state.size() != 2 * m_.size()) throw DataError(stem.string() + ": optimizer state does not match the model");
  for (std::size_t i = 0; i < m_.size(); ++i) {
    const auto& m = state.get("m." + store_->at(i).name).value;
    const auto& v = state.get("v." + store_->at(i).name).value;
    if (m.rows() != m_[i].rows() || m.cols() != m_[i].cols()) {
      throw DataError(stem.string() + ": optimizer state shape mismatch for " + store_->at(i).name);
    }
    m_[i] = m;
    v_[i] = v;
  }
  t_ = meta.at("step").get<long>();
}

template class AdamW<float>;
template class AdamW<double>;

void OneCycle::validate() const {
  require(max_lr > 0.0 && total_steps >= 1, "one-cycle: need max_lr > 0 and total_steps >= 1");
  require(pct_start > 0.0 && pct_start < 1.0, "one-cycle: pct_start must be in (0, 1)");
  require(div > 0.0 && final_div > 0.0, "one-cycle: divisors must be positive");
}

double OneCycle::lr(long step) const {
  const double initial = max_lr / div;
  const double floor = initial / final_div;
  auto anneal = [](double from, double to, double pct) {
    return to + 0.5 * (from - to) * (1.0 + std::cos(std::numbers::pi * pct));
  };
  const double s = static_cast<double>(std::clamp(step, 0L, total_steps - 1));
  const double warm_end = pct_start * static_cast<double>(total_steps) - 1.0;
  const double last = static_cast<double>(total_steps) - 1.0;
  if (warm_end <= 0.0) return last > 0.0 ? anneal(max_lr, floor, s / last) : max_lr;
  if (s <= warm_end) return anneal(initial, max_lr, s / warm_end);
  return anneal(max_lr, floor, (s - warm_end) / (last - warm_end));
}

}  // namespace lqrppg
