#pragma once

// Client objectives: symmetric InfoNCE for paired data, prototype anchoring
// for single-modality data, and the prototype-proximal regularizer.

#include <cmath>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "rcsr/autodiff.hpp"
#include "rcsr/common.hpp"
#include "rcsr/model.hpp"
#include "rcsr/tensor.hpp"

namespace rcsr {

struct LossWeights {
  double tau_nce = 0.07;
  double lambda_align = 0.1;   // prototype term of the regularizer
  double lambda_prox = 0.01;   // proximal term of the regularizer
  double lambda_anchor = 1.0;
};

namespace detail {

inline void require_unit_rows(const Tensor& z, const char* what) {
  for (std::size_t r = 0; r < z.rows(); ++r) {
    const double n = l2_norm(z.row(r));
    if (std::abs(n - 1.0) > 1e-6) {
      throw std::invalid_argument(std::string(what) + ": row " + std::to_string(r) +
                                  " has norm " + std::to_string(n) + ", expected unit norm");
    }
  }
}

}  // namespace detail

// --- graph builders --------------------------------------------------------

/// Symmetric InfoNCE from a B x B logit matrix whose diagonal holds the
/// matched pairs.
inline ad::NodeId info_nce_logits_node(ad::Graph& g, ad::NodeId logits) {
  const std::size_t batch = g.rows(logits);
  if (g.cols(logits) != batch) throw std::invalid_argument("info_nce: logits must be square");
  const ad::NodeId eye = g.constant(Tensor::identity(batch));
  const ad::NodeId i2t = g.sum(g.mul(g.log_softmax_rows(logits), eye));
  const ad::NodeId t2i = g.sum(g.mul(g.log_softmax_rows(g.transpose(logits)), eye));
  return g.scale(g.add(i2t, t2i), -1.0 / (2.0 * static_cast<double>(batch)));
}

/// Symmetric InfoNCE over B matched rows of zi and zt.
inline ad::NodeId info_nce_node(ad::Graph& g, ad::NodeId zi, ad::NodeId zt, double tau) {
  if (!(tau > 0.0)) throw std::invalid_argument("info_nce: temperature must be positive");
  return info_nce_logits_node(g, g.scale(g.matmul(zi, g.transpose(zt)), 1.0 / tau));
}

/// 1 - mean_i cos(z_i, anchor).
inline ad::NodeId anchor_node(ad::Graph& g, ad::NodeId z, ad::NodeId anchor) {
  return g.affine(g.mean(g.cosine_rows(z, anchor)), -1.0, 1.0);
}

/// 1 - cos(batch prototype, global prototype). The batch prototype is the row
/// mean; cosine is scale invariant so normalizing it first changes nothing.
inline ad::NodeId prototype_drift_node(ad::Graph& g, ad::NodeId z, ad::NodeId global_proto) {
  return g.affine(g.sum(g.cosine_rows(g.mean_rows(z), global_proto)), -1.0, 1.0);
}

/// sum over trainable tensors of ||W - W_ref||^2.
inline ad::NodeId proximal_node(ad::Graph& g, const ParamNodes& nodes,
                                const TrainableParams& reference) {
  ad::NodeId total = ad::kNoNode;
  reference.for_each([&](const std::string& name, const Tensor& ref) {
    const ad::NodeId term = g.squared_norm(g.sub(nodes.at(name), g.constant(ref)));
    total = total == ad::kNoNode ? term : g.add(total, term);
  });
  return total;
}

// --- scalar evaluations ------------------------------------------------------

inline double info_nce(const Tensor& zi, const Tensor& zt, double tau) {
  if (!(tau > 0.0)) throw std::invalid_argument("info_nce: temperature must be positive");
  if (zi.rows() == 0 || !zi.same_shape(zt)) {
    throw std::invalid_argument("info_nce: embeddings must be non-empty and equally shaped");
  }
  detail::require_unit_rows(zi, "info_nce");
  detail::require_unit_rows(zt, "info_nce");
  ad::Graph g;
  g.set_output(info_nce_node(g, g.constant(zi), g.constant(zt), tau));
  return ad::evaluate(g, {});
}

inline double anchor_loss(const Tensor& z, std::span<const double> anchor) {
  if (l2_norm(anchor) < ad::kDegenerateNorm) throw std::invalid_argument("anchor_loss: zero anchor");
  if (z.rows() == 0 || z.cols() != anchor.size()) {
    throw std::invalid_argument("anchor_loss: dimension mismatch");
  }
  detail::require_unit_rows(z, "anchor_loss");
  ad::Graph g;
  g.set_output(anchor_node(g, g.constant(z), g.constant(Tensor::row_vector(anchor))));
  return ad::evaluate(g, {});
}

/// Locally computed prototypes; a slot is empty when the modality is absent.
struct LocalPrototypes {
  std::optional<std::vector<double>> image;
  std::optional<std::vector<double>> text;

  const std::optional<std::vector<double>>& of(Modality m) const {
    return m == Modality::image ? image : text;
  }
};

/// (lambda_a / 2) * sum_{v available} (1 - cos(p_v, pbar_v)) + lambda_s * ||theta_k - theta||^2
inline double reg_loss(const LocalPrototypes& local, const GlobalPrototypes& global,
                       const TrainableParams& theta_k, const TrainableParams& theta,
                       double lambda_a, double lambda_s, const std::set<Modality>& available) {
  if (lambda_a < 0.0 || lambda_s < 0.0) {
    throw std::invalid_argument("reg_loss: coefficients must be non-negative");
  }
  if (available.empty()) throw std::invalid_argument("reg_loss: no available modality");
  double drift = 0.0;
  for (Modality m : available) {
    const auto& p = local.of(m);
    if (!p) {
      throw std::invalid_argument(std::string("reg_loss: missing local prototype for ") +
                                  to_string(m));
    }
    drift += 1.0 - cosine(*p, global.of(m));
  }
  return 0.5 * lambda_a * drift + lambda_s * squared_distance(theta_k, theta);
}

// --- modality-dispatched client objective -----------------------------------

struct Batch {
  std::optional<Tensor> image;
  std::optional<Tensor> text;

  std::size_t size() const { return image ? image->rows() : (text ? text->rows() : 0); }
};

struct ClientLossGraph {
  ad::Graph graph;
  ParamNodes params;
  bool uses_nce = false;
  bool uses_anchor = false;
};

inline void check_batch(const Batch& batch, ModalityType type) {
  const bool want_i = has_modality(type, Modality::image);
  const bool want_t = has_modality(type, Modality::text);
  if (want_i != batch.image.has_value() || want_t != batch.text.has_value()) {
    throw std::invalid_argument(std::string("client_loss: batch contents do not match a ") +
                                to_string(type) + " client");
  }
  if (batch.image && batch.text && batch.image->rows() != batch.text->rows()) {
    throw std::invalid_argument("client_loss: image and text batch sizes differ");
  }
  if (batch.size() == 0) throw std::invalid_argument("client_loss: empty batch");
}

/// Paired: InfoNCE + reg. Single modality: lambda_anc * anchor(missing prototype) + reg.
inline ClientLossGraph build_client_loss_graph(const FrozenBackbone& backbone, const Batch& batch,
                                               ModalityType type, const GlobalPrototypes& protos,
                                               const TrainableParams& theta_ref,
                                               const LossWeights& w) {
  check_batch(batch, type);
  ClientLossGraph out;
  ad::Graph& g = out.graph;
  out.params = declare_params(g, theta_ref);

  ad::NodeId zi = ad::kNoNode;
  ad::NodeId zt = ad::kNoNode;
  if (batch.image) zi = encode_node(g, out.params, backbone, Modality::image, g.constant(*batch.image));
  if (batch.text) zt = encode_node(g, out.params, backbone, Modality::text, g.constant(*batch.text));

  ad::NodeId task = ad::kNoNode;
  if (type == ModalityType::paired) {
    task = info_nce_node(g, zi, zt, w.tau_nce);
    out.uses_nce = true;
  } else {
    const Modality held = type == ModalityType::image_only ? Modality::image : Modality::text;
    const ad::NodeId z = held == Modality::image ? zi : zt;
    const ad::NodeId anchor = g.constant(Tensor::row_vector(protos.of(other(held))));
    task = g.scale(anchor_node(g, z, anchor), w.lambda_anchor);
    out.uses_anchor = true;
  }

  ad::NodeId total = task;
  if (w.lambda_align != 0.0) {
    ad::NodeId drift = ad::kNoNode;
    for (Modality m : {Modality::image, Modality::text}) {
      if (!has_modality(type, m)) continue;
      const ad::NodeId z = m == Modality::image ? zi : zt;
      const ad::NodeId term =
          prototype_drift_node(g, z, g.constant(Tensor::row_vector(protos.of(m))));
      drift = drift == ad::kNoNode ? term : g.add(drift, term);
    }
    total = g.add(total, g.scale(drift, 0.5 * w.lambda_align));
  }
  if (w.lambda_prox != 0.0) {
    total = g.add(total, g.scale(proximal_node(g, out.params, theta_ref), w.lambda_prox));
  }
  g.set_output(total);
  return out;
}

inline double client_loss(const Batch& batch, ModalityType type, const GlobalPrototypes& protos,
                          const TrainableParams& theta_k, const TrainableParams& theta,
                          const FrozenBackbone& backbone, const LossWeights& w) {
  ClientLossGraph lg = build_client_loss_graph(backbone, batch, type, protos, theta, w);
  ad::Bindings b;
  bind_params(theta_k, b);
  return ad::evaluate(lg.graph, b);
}

}  // namespace rcsr
