#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "seer/config.hpp"
#include "seer/params.hpp"

namespace seer {

/// Adam with the inverse-sqrt warmup schedule of the base Transformer:
/// lr(t) = lr_factor * d_model^-0.5 * min(t^-0.5, t * warmup^-1.5).
template <typename Real>
class Adam {
 public:
  Adam(const TrainConfig& cfg, int d_model)
      : beta1_(cfg.adam_beta1),
        beta2_(cfg.adam_beta2),
        eps_(cfg.adam_eps),
        lr_factor_(cfg.lr_factor),
        warmup_(std::max(1, cfg.warmup_steps)),
        d_model_(d_model) {}

  double learning_rate(long long t) const {
    const double scale = lr_factor_ / std::sqrt(static_cast<double>(d_model_));
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(t));
    const double warm = t * std::pow(static_cast<double>(warmup_), -1.5);
    return scale * std::min(inv_sqrt, warm);
  }

  long long step_count() const { return t_; }
  void set_step_count(long long t) { t_ = t; }

  /// One update over every parameter that accumulated a gradient; clears all
  /// gradients afterwards.
  void step(ParamStore<Real>& params) {
    ++t_;
    const double lr = learning_rate(t_);
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (auto& [name, p] : params.all()) {
      if (!p.has_grad()) continue;
      auto& s = state_[name];
      if (s.m.empty()) {
        s.m.assign(p.numel(), 0.0);
        s.v.assign(p.numel(), 0.0);
      }
      const auto g = p.grad();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double gi = static_cast<double>(g[i]);
        s.m[i] = beta1_ * s.m[i] + (1.0 - beta1_) * gi;
        s.v[i] = beta2_ * s.v[i] + (1.0 - beta2_) * gi * gi;
        const double mhat = s.m[i] / bc1;
        const double vhat = s.v[i] / bc2;
        p.value()[i] -= static_cast<Real>(lr * mhat / (std::sqrt(vhat) + eps_));
      }
    }
    params.zero_grad();
  }

  struct Slot {
    std::vector<double> m, v;
  };

  std::map<std::string, Slot>& state() { return state_; }
  const std::map<std::string, Slot>& state() const { return state_; }

 private:
  double beta1_, beta2_, eps_, lr_factor_;
  int warmup_, d_model_;
  long long t_ = 0;
  std::map<std::string, Slot> state_;
};

}  // namespace seer
