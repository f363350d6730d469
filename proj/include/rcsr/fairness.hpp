#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "rcsr/common.hpp"

namespace rcsr {

struct FairnessConfig {
  double eta_q = 0.1;
  double tau_fair = 0.1;
  double group_momentum = 0.9;
  bool entropy_regularized = false;  // q_k <- q_k^(1 - eta*tau) * exp(eta * l_k)
  bool zscore = false;               // per-group z-scores instead of ratios to the running mean
};

inline constexpr double kExponentClamp = 50.0;
inline constexpr double kGroupMeanFloor = 1e-12;

struct FairnessState {
  FairnessConfig config;
  std::vector<double> q;
  std::array<double, 3> group_mean{0.0, 0.0, 0.0};
  std::array<bool, 3> group_seen{false, false, false};

  static FairnessState uniform(std::size_t num_clients, FairnessConfig cfg = {}) {
    if (num_clients == 0) throw std::invalid_argument("fairness: need at least one client");
    FairnessState s;
    s.config = cfg;
    s.q.assign(num_clients, 1.0 / static_cast<double>(num_clients));
    return s;
  }
};

struct NormalizedLoss {
  double value = 0.0;
  bool clamped = false;
};

/// l / lbar_group, initializing lbar to l on the group's first observation.
inline NormalizedLoss normalize_loss(double loss, ModalityType group, FairnessState& state) {
  if (!std::isfinite(loss)) throw std::invalid_argument("normalize_loss: loss is not finite");
  const std::size_t gi = group_index(group);
  if (!state.group_seen[gi]) {
    state.group_seen[gi] = true;
    state.group_mean[gi] = loss;
  }
  NormalizedLoss out;
  double denom = state.group_mean[gi];
  if (denom <= kGroupMeanFloor) {
    denom = kGroupMeanFloor;
    out.clamped = true;
  }
  out.value = loss / denom;
  return out;
}

/// EMA of each group's running mean toward the mean loss this round.
inline void update_group_means(FairnessState& state,
                               const std::vector<std::pair<ModalityType, double>>& losses) {
  std::array<double, 3> sum{};
  std::array<std::size_t, 3> count{};
  for (const auto& [group, loss] : losses) {
    sum[group_index(group)] += loss;
    ++count[group_index(group)];
  }
  const double mu = state.config.group_momentum;
  for (std::size_t g = 0; g < 3; ++g) {
    if (count[g] == 0) continue;
    const double round_mean = sum[g] / static_cast<double>(count[g]);
    if (!state.group_seen[g]) {
      state.group_seen[g] = true;
      state.group_mean[g] = round_mean;
    } else {
      state.group_mean[g] = mu * state.group_mean[g] + (1.0 - mu) * round_mean;
    }
  }
}

/// Z-score of each loss within its modality group for one round; a group
/// with zero spread maps to 0.
inline std::vector<double> zscore_losses(const std::vector<std::pair<ModalityType, double>>& losses) {
  std::array<double, 3> sum{}, sq{};
  std::array<std::size_t, 3> count{};
  for (const auto& [g, l] : losses) {
    sum[group_index(g)] += l;
    ++count[group_index(g)];
  }
  std::array<double, 3> mean{};
  for (std::size_t g = 0; g < 3; ++g) mean[g] = count[g] ? sum[g] / static_cast<double>(count[g]) : 0.0;
  for (const auto& [g, l] : losses) sq[group_index(g)] += (l - mean[group_index(g)]) * (l - mean[group_index(g)]);
  std::vector<double> out;
  for (const auto& [g, l] : losses) {
    const std::size_t gi = group_index(g);
    const double sd = std::sqrt(sq[gi] / static_cast<double>(count[gi]));
    out.push_back(sd > 0.0 ? (l - mean[gi]) / sd : 0.0);
  }
  return out;
}

struct QUpdate {
  std::size_t clamped_exponents = 0;
};

/// Exponentiated-gradient step for the selected clients, then renormalization
/// over all N entries.
inline QUpdate update_q(FairnessState& state,
                        const std::vector<std::pair<std::size_t, double>>& selected) {
  const std::size_t n = state.q.size();
  std::vector<double> gain(n, 0.0);
  std::vector<bool> seen(n, false);
  for (const auto& [id, l] : selected) {
    if (id >= n) throw std::out_of_range("update_q: client id " + std::to_string(id) + " out of range");
    if (seen[id]) throw std::invalid_argument("update_q: client " + std::to_string(id) + " listed twice");
    seen[id] = true;
    gain[id] = state.config.eta_q * l;
  }
  QUpdate info;
  auto clamp_exp = [&](double e) {
    if (std::abs(e) > kExponentClamp) {
      ++info.clamped_exponents;
      return std::clamp(e, -kExponentClamp, kExponentClamp);
    }
    return e;
  };

  if (state.config.entropy_regularized) {
    // Work in log space so the power term cannot underflow.
    const double keep = 1.0 - state.config.eta_q * state.config.tau_fair;
    std::vector<double> logq(n);
    for (std::size_t k = 0; k < n; ++k) logq[k] = keep * std::log(state.q[k]) + clamp_exp(gain[k]);
    const double top = *std::max_element(logq.begin(), logq.end());
    double total = 0.0;
    for (std::size_t k = 0; k < n; ++k) total += (state.q[k] = std::exp(logq[k] - top));
    for (double& v : state.q) v /= total;
    return info;
  }

  for (std::size_t k = 0; k < n; ++k) {
    if (seen[k]) state.q[k] *= std::exp(clamp_exp(gain[k]));
  }
  const double total = std::accumulate(state.q.begin(), state.q.end(), 0.0);
  for (double& v : state.q) v /= total;
  return info;
}

/// w_k = wR_k q_k / sum_j wR_j q_j over the selected ids.
inline std::vector<double> fuse_weights(const std::vector<double>& router_weights,
                                        const std::vector<double>& q,
                                        const std::vector<std::size_t>& selected) {
  if (router_weights.size() != selected.size()) {
    throw std::invalid_argument("fuse_weights: one router weight per selected client");
  }
  std::vector<double> w(selected.size());
  double total = 0.0;
  for (std::size_t i = 0; i < selected.size(); ++i) {
    total += (w[i] = router_weights[i] * q.at(selected[i]));
  }
  if (!(total >= 1e-300)) throw std::domain_error("fuse_weights: fused weights underflow");
  for (double& v : w) v /= total;
  return w;
}

inline double simplex_entropy(const std::vector<double>& p) {
  double h = 0.0;
  for (double v : p) {
    if (v > 0.0) h -= v * std::log(v);
  }
  return h;
}

}  // namespace rcsr
