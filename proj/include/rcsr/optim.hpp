#pragma once

#include <cmath>
#include <map>
#include <numbers>
#include <stdexcept>
#include <string>

#include "rcsr/autodiff.hpp"
#include "rcsr/tensor.hpp"

namespace rcsr {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;  // decoupled, AdamW style
};

// Adam over any parameter set exposing for_each(name, Tensor&).
class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  template <typename Params>
  void step(Params& params, const ad::Gradients& grads, double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    params.for_each([&](const std::string& name, Tensor& w) {
      const auto it = grads.find(name);
      if (it == grads.end()) return;
      const Tensor& g = it->second;
      auto [slot, fresh] = moments_.try_emplace(name);
      if (fresh) slot->second = {Tensor(w.rows(), w.cols()), Tensor(w.rows(), w.cols())};
      Tensor& m = slot->second.first;
      Tensor& v = slot->second.second;
      for (std::size_t i = 0; i < w.size(); ++i) {
        m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
        v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
        const double update = (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg_.eps);
        w[i] -= lr * (update + cfg_.weight_decay * w[i]);
      }
    });
  }

  std::size_t steps() const { return t_; }

 private:
  AdamConfig cfg_;
  std::size_t t_ = 0;
  std::map<std::string, std::pair<Tensor, Tensor>> moments_;
};

/// Linear warm-up over the first `warmup` rounds, then cosine annealing.
/// Rounds are 1-based.
inline double scheduled_lr(double base, std::size_t round, std::size_t total_rounds,
                           std::size_t warmup = 5) {
  if (round == 0) throw std::invalid_argument("scheduled_lr: rounds are 1-based");
  if (round <= warmup) return base * static_cast<double>(round) / static_cast<double>(warmup);
  if (total_rounds <= warmup) return base;
  const double progress = static_cast<double>(round - 1 - warmup) /
                          static_cast<double>(total_rounds - warmup);
  return base * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

}  // namespace rcsr
