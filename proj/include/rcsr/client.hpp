#pragma once

// Local training, prototypes and the statistics a client reports after a round.

#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "rcsr/autodiff.hpp"
#include "rcsr/common.hpp"
#include "rcsr/data.hpp"
#include "rcsr/losses.hpp"
#include "rcsr/model.hpp"
#include "rcsr/optim.hpp"
#include "rcsr/rng.hpp"

namespace rcsr {

class DegeneratePrototype : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ClientState {
  std::size_t id = 0;
  ModalityType type = ModalityType::paired;
  SyntheticDataset train;   // both raw views are generated; only the available ones are read
  SyntheticDataset test;    // local holdout slice used for per-client evaluation

  std::size_t num_samples() const { return train.size(); }
  bool has(Modality m) const { return has_modality(type, m); }
};

struct LocalTrainConfig {
  double lr = 1e-2;
  std::size_t batch_size = 32;
  std::size_t local_epochs = 1;
  LossWeights loss;
  AdamConfig adam;
};

struct LocalTrainResult {
  TrainableParams theta;
  double mean_loss = 0.0;
  std::size_t steps = 0;
  std::vector<double> step_losses;
  std::size_t nce_evaluations = 0;
  std::size_t anchor_evaluations = 0;
  bool skipped = false;   // client had no local data
};

inline Batch make_batch(const ClientState& client, const std::vector<std::size_t>& rows) {
  Batch b;
  auto gather = [&](const Tensor& src) {
    Tensor out(rows.size(), src.cols());
    for (std::size_t r = 0; r < rows.size(); ++r) {
      std::copy_n(src.row(rows[r]).begin(), src.cols(), out.row(r).begin());
    }
    return out;
  };
  if (client.has(Modality::image)) b.image = gather(client.train.image);
  if (client.has(Modality::text)) b.text = gather(client.train.text);
  return b;
}

/// Splits a shuffled epoch into minibatches. Datasets no larger than the
/// batch size train on one full batch; otherwise the final batch may be short.
inline std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch_size,
                                                          Rng& rng) {
  if (batch_size == 0) throw std::invalid_argument("batch size must be positive");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t start = 0; start < n; start += batch_size) {
    const std::size_t end = std::min(n, start + batch_size);
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                     order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return out;
}

inline LocalTrainResult local_train(const TrainableParams& theta, const ClientState& client,
                                    const FrozenBackbone& backbone,
                                    const GlobalPrototypes& protos, const LocalTrainConfig& cfg,
                                    std::uint64_t seed) {
  LocalTrainResult res;
  res.theta = theta;
  if (client.num_samples() == 0) {
    res.skipped = true;
    return res;
  }
  Rng rng(seed);
  Adam adam(cfg.adam);
  for (std::size_t epoch = 0; epoch < cfg.local_epochs; ++epoch) {
    for (const auto& rows : epoch_batches(client.num_samples(), cfg.batch_size, rng)) {
      const ClientLossGraph lg =
          build_client_loss_graph(backbone, make_batch(client, rows), client.type, protos, theta, cfg.loss);
      res.nce_evaluations += lg.uses_nce;
      res.anchor_evaluations += lg.uses_anchor;
      ad::Bindings b;
      bind_params(res.theta, b);
      std::set<std::string> wrt;
      for (const auto& [name, id] : lg.params) wrt.insert(name);
      const ad::ValueAndGradient vg = ad::value_and_gradient(lg.graph, b, wrt);
      res.step_losses.push_back(vg.value);
      adam.step(res.theta, vg.gradients, cfg.lr);
      ++res.steps;
    }
  }
  res.mean_loss = std::accumulate(res.step_losses.begin(), res.step_losses.end(), 0.0) /
                  static_cast<double>(res.step_losses.size());
  return res;
}

/// Normalized row mean.
inline std::vector<double> compute_prototype(const Tensor& embeddings) {
  if (embeddings.rows() == 0) throw std::invalid_argument("compute_prototype: no embeddings");
  std::vector<double> mean(embeddings.cols(), 0.0);
  for (std::size_t r = 0; r < embeddings.rows(); ++r) {
    for (std::size_t c = 0; c < embeddings.cols(); ++c) mean[c] += embeddings(r, c);
  }
  for (double& v : mean) v /= static_cast<double>(embeddings.rows());
  const double n = l2_norm(mean);
  if (n < ad::kDegenerateNorm) {
    throw DegeneratePrototype("compute_prototype: mean embedding has norm " + std::to_string(n));
  }
  for (double& v : mean) v /= n;
  return mean;
}

struct UpdateGeometry {
  double l2 = 0.0;
  double max_abs = 0.0;
  double cos_prev = 0.0;   // cosine to the previous global aggregate update
  double per_step = 0.0;

  std::array<double, 4> as_array() const { return {l2, max_abs, cos_prev, per_step}; }
};

inline UpdateGeometry update_geometry(std::span<const double> delta,
                                      std::span<const double> prev_update, std::size_t steps) {
  UpdateGeometry g;
  g.l2 = l2_norm(delta);
  for (double v : delta) g.max_abs = std::max(g.max_abs, std::abs(v));
  if (!prev_update.empty()) {
    if (prev_update.size() != delta.size()) throw std::invalid_argument("update_geometry: length mismatch");
    g.cos_prev = std::clamp(cosine(delta, prev_update), -1.0, 1.0);
  }
  g.per_step = steps == 0 ? 0.0 : g.l2 / static_cast<double>(steps);
  return g;
}

struct ClientStatistics {
  std::size_t id = 0;
  ModalityType type = ModalityType::paired;
  std::vector<double> p_image;
  std::vector<double> p_text;
  UpdateGeometry gamma;
  std::array<bool, 2> mask{true, true};
  double loss = 0.0;
  std::size_t num_samples = 0;

  const std::vector<double>& prototype(Modality m) const {
    return m == Modality::image ? p_image : p_text;
  }
};

/// Locally computed prototypes for the available modalities, from one full
/// pass over the client's training data.
inline LocalPrototypes local_prototypes(const ClientState& client, const TrainableParams& theta_k,
                                        const FrozenBackbone& backbone) {
  LocalPrototypes out;
  if (client.has(Modality::image)) {
    out.image = compute_prototype(encode(theta_k, backbone, client.train.image, Modality::image));
  }
  if (client.has(Modality::text)) {
    out.text = compute_prototype(encode(theta_k, backbone, client.train.text, Modality::text));
  }
  return out;
}

inline ClientStatistics build_statistics(const ClientState& client, const TrainableParams& theta_k,
                                         const TrainableParams& theta,
                                         const FrozenBackbone& backbone,
                                         const GlobalPrototypes& protos, double loss,
                                         std::size_t steps,
                                         std::span<const double> prev_update) {
  ClientStatistics s;
  s.id = client.id;
  s.type = client.type;
  s.mask = modality_mask(client.type);
  s.loss = loss;
  s.num_samples = client.num_samples();
  const LocalPrototypes local = local_prototypes(client, theta_k, backbone);
  s.p_image = local.image ? *local.image : protos.image;
  s.p_text = local.text ? *local.text : protos.text;
  const std::vector<double> d = flatten(delta(theta_k, theta));
  s.gamma = update_geometry(d, prev_update, steps);
  return s;
}

}  // namespace rcsr
