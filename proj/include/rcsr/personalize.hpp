#pragma once

// Client-local residual adapters on top of the shared embedding, scaled by a
// strength derived from the client's router weight. Never aggregated.

#include <algorithm>
#include <cstdint>
#include <map>
#include <numeric>
#include <set>
#include <stdexcept>
#include <string>

#include "rcsr/autodiff.hpp"
#include "rcsr/client.hpp"
#include "rcsr/losses.hpp"
#include "rcsr/model.hpp"
#include "rcsr/optim.hpp"
#include "rcsr/rng.hpp"

namespace rcsr {

struct PersonalAdapter {
  Tensor image_w1, image_w2;  // d x d_h, d_h x d
  Tensor text_w1, text_w2;

  const Tensor& w1(Modality m) const { return m == Modality::image ? image_w1 : text_w1; }
  const Tensor& w2(Modality m) const { return m == Modality::image ? image_w2 : text_w2; }

  template <typename Fn>
  void for_each(Fn&& fn) {
    fn("image.w1", image_w1);
    fn("image.w2", image_w2);
    fn("text.w1", text_w1);
    fn("text.w2", text_w2);
  }
  template <typename Fn>
  void for_each(Fn&& fn) const {
    fn("image.w1", image_w1);
    fn("image.w2", image_w2);
    fn("text.w1", text_w1);
    fn("text.w2", text_w2);
  }
  friend bool operator==(const PersonalAdapter&, const PersonalAdapter&) = default;
};

inline PersonalAdapter init_personal_adapter(std::size_t embed_dim, std::uint64_t seed,
                                             std::size_t hidden = 0) {
  const std::size_t h = hidden == 0 ? std::max<std::size_t>(1, embed_dim / 2) : hidden;
  Rng rng(seed);
  PersonalAdapter a;
  a.image_w1 = uniform_tensor(embed_dim, h, 0.05, rng);
  a.image_w2 = uniform_tensor(h, embed_dim, 1e-4, rng);
  a.text_w1 = uniform_tensor(embed_dim, h, 0.05, rng);
  a.text_w2 = uniform_tensor(h, embed_dim, 1e-4, rng);
  return a;
}

/// min(lambda_p * (1 + max(0, 0.5 - w)), 0.5)
inline double personalization_strength(double router_weight, double lambda_p) {
  if (!(router_weight >= 0.0 && router_weight <= 1.0)) {
    throw std::invalid_argument("personalization_strength: router weight must be in [0, 1]");
  }
  if (!(lambda_p > 0.0)) throw std::invalid_argument("personalization_strength: lambda_p must be positive");
  return std::min(lambda_p * (1.0 + std::max(0.0, 0.5 - router_weight)), 0.5);
}

inline ad::NodeId personalized_node(ad::Graph& g, ad::NodeId z, ad::NodeId w1, ad::NodeId w2,
                                    double strength) {
  const ad::NodeId residual = g.matmul(g.gelu(g.matmul(z, w1)), w2);
  return g.l2_normalize_rows(g.add(z, g.scale(residual, strength)));
}

/// normalize(z + s * W2 GELU(W1 z)) row by row. Rows whose residual is exactly
/// zero are returned untouched.
inline Tensor personalize_embedding(const PersonalAdapter& adapter, Modality m, const Tensor& z,
                                    double strength) {
  const Tensor& w1 = adapter.w1(m);
  const Tensor& w2 = adapter.w2(m);
  if (z.cols() != w1.rows() || w2.cols() != z.cols()) {
    throw std::invalid_argument("personalize_embedding: embedding dimension " + std::to_string(z.cols()) +
                                " does not match adapter " + w1.shape_string());
  }
  ad::Graph g;
  const ad::NodeId zn = g.constant(z);
  const ad::NodeId residual = g.scale(g.matmul(g.gelu(g.matmul(zn, g.constant(w1))), g.constant(w2)), strength);
  const ad::NodeId out = g.l2_normalize_rows(g.add(zn, residual));
  const auto v = ad::forward(g, {});
  Tensor result = v[out];
  const Tensor& r = v[residual];
  for (std::size_t i = 0; i < z.rows(); ++i) {
    const auto row = r.row(i);
    if (std::all_of(row.begin(), row.end(), [](double x) { return x == 0.0; })) {
      std::copy_n(z.row(i).begin(), z.cols(), result.row(i).begin());
    }
  }
  return result;
}

struct PersonalTuneConfig {
  double lr = 1e-3;
  std::size_t batch_size = 32;
  double tau_nce = 0.07;
  AdamConfig adam;
};

/// Adapter-only objective for one batch of shared embeddings.
struct PersonalLossGraph {
  ad::Graph graph;
  std::set<std::string> params;
};

inline PersonalLossGraph build_personal_loss_graph(const PersonalAdapter& adapter, ModalityType type,
                                                   const std::optional<Tensor>& z_image,
                                                   const std::optional<Tensor>& z_text,
                                                   const GlobalPrototypes& protos, double strength,
                                                   double tau_nce) {
  PersonalLossGraph out;
  ad::Graph& g = out.graph;
  std::map<std::string, ad::NodeId> p;
  adapter.for_each([&](const std::string& name, const Tensor& t) {
    p[name] = g.input(name, t.rows(), t.cols());
    out.params.insert(name);
  });
  auto branch = [&](Modality m, const Tensor& z) {
    const std::string pre = m == Modality::image ? "image." : "text.";
    return personalized_node(g, g.constant(z), p.at(pre + "w1"), p.at(pre + "w2"), strength);
  };
  if (type == ModalityType::paired) {
    if (!z_image || !z_text) throw std::invalid_argument("personal loss: paired client needs both modalities");
    g.set_output(info_nce_node(g, branch(Modality::image, *z_image), branch(Modality::text, *z_text), tau_nce));
  } else {
    const Modality held = type == ModalityType::image_only ? Modality::image : Modality::text;
    const auto& z = held == Modality::image ? z_image : z_text;
    if (!z) throw std::invalid_argument("personal loss: missing embeddings for the held modality");
    g.set_output(anchor_node(g, branch(held, *z), g.constant(Tensor::row_vector(protos.of(other(held))))));
  }
  return out;
}

struct PersonalTuneResult {
  PersonalAdapter adapter;
  double mean_loss = 0.0;
  std::size_t steps = 0;
};

/// One pass over the client's training data updating only the adapter. The
/// shared parameters are read, never written.
inline PersonalTuneResult personal_finetune(const ClientState& client, const PersonalAdapter& adapter,
                                            const TrainableParams& theta, const FrozenBackbone& backbone,
                                            const GlobalPrototypes& protos, double strength,
                                            const PersonalTuneConfig& cfg, std::uint64_t seed) {
  PersonalTuneResult res;
  res.adapter = adapter;
  if (client.num_samples() == 0) return res;
  std::optional<Tensor> zi, zt;
  if (client.has(Modality::image)) zi = encode(theta, backbone, client.train.image, Modality::image);
  if (client.has(Modality::text)) zt = encode(theta, backbone, client.train.text, Modality::text);
  auto rows_of = [](const std::optional<Tensor>& z, const std::vector<std::size_t>& rows) -> std::optional<Tensor> {
    if (!z) return std::nullopt;
    Tensor out(rows.size(), z->cols());
    for (std::size_t r = 0; r < rows.size(); ++r) std::copy_n(z->row(rows[r]).begin(), z->cols(), out.row(r).begin());
    return out;
  };
  Rng rng(seed);
  Adam adam(cfg.adam);
  double total = 0.0;
  for (const auto& rows : epoch_batches(client.num_samples(), cfg.batch_size, rng)) {
    const PersonalLossGraph lg = build_personal_loss_graph(res.adapter, client.type, rows_of(zi, rows),
                                                           rows_of(zt, rows), protos, strength, cfg.tau_nce);
    ad::Bindings b;
    res.adapter.for_each([&](const std::string& name, const Tensor& t) { b[name] = t; });
    const ad::ValueAndGradient vg = ad::value_and_gradient(lg.graph, b, lg.params);
    total += vg.value;
    adam.step(res.adapter, vg.gradients, cfg.lr);
    ++res.steps;
  }
  res.mean_loss = total / static_cast<double>(res.steps);
  return res;
}

}  // namespace rcsr
