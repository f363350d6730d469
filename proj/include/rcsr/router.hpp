#pragma once

// Semantic router: client statistics -> aggregation weights, plus the
// prototype-consistency and alignment-consistency objectives it is trained on.

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "rcsr/autodiff.hpp"
#include "rcsr/client.hpp"
#include "rcsr/common.hpp"
#include "rcsr/rng.hpp"
#include "rcsr/tensor.hpp"

namespace rcsr {

struct RouterConfig {
  std::size_t embed_dim = 16;
  std::size_t hidden = 128;
  std::size_t heads = 4;
  std::size_t layers = 2;
  double init_scale = 0.05;

  std::size_t token_dim() const { return 2 * embed_dim + 4 + 2 + 1; }

  void validate() const {
    if (embed_dim == 0 || hidden == 0 || heads == 0) {
      throw std::invalid_argument("router: dimensions must be positive");
    }
    if (hidden % heads != 0) throw std::invalid_argument("router: hidden size must divide into heads");
  }
  friend bool operator==(const RouterConfig&, const RouterConfig&) = default;
};

struct RouterLossWeights {
  double beta_image = 1.0;
  double beta_text = 1.0;
  double beta_entropy = 0.2;
  double beta_align = 0.3;
  bool mask_filled = false;   // drop filled prototype slots from the weighted prototype sum
};

struct RouterParams {
  RouterConfig config;
  std::map<std::string, Tensor> tensors;

  template <typename Fn>
  void for_each(Fn&& fn) {
    for (auto& [name, t] : tensors) fn(name, t);
  }
  template <typename Fn>
  void for_each(Fn&& fn) const {
    for (const auto& [name, t] : tensors) fn(name, t);
  }
  const Tensor& at(const std::string& name) const { return tensors.at(name); }

  friend bool operator==(const RouterParams& a, const RouterParams& b) {
    return a.config == b.config && a.tensors == b.tensors;
  }
};

inline RouterParams init_router(const RouterConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  RouterParams p{cfg, {}};
  const std::size_t h = cfg.hidden;
  p.tensors["mlp.w1"] = uniform_tensor(cfg.token_dim(), h, cfg.init_scale, rng);
  p.tensors["mlp.w2"] = uniform_tensor(h, h, cfg.init_scale, rng);
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const std::string pre = "layer" + std::to_string(l) + ".";
    for (const char* name : {"q", "k", "v", "o", "ffn1", "ffn2"}) {
      p.tensors[pre + name] = uniform_tensor(h, h, cfg.init_scale, rng);
    }
  }
  p.tensors["head"] = Tensor(h, 1);
  return p;
}

/// One row per client: [p_I * m_I | p_T * m_T | gamma | mask | loss / loss_scale].
inline Tensor router_tokens(const std::vector<ClientStatistics>& stats, std::size_t embed_dim,
                            double loss_scale) {
  if (stats.empty()) throw std::invalid_argument("router: no client statistics");
  const std::size_t d = embed_dim;
  Tensor tok(stats.size(), 2 * d + 7);
  const double scale = loss_scale > 1e-12 ? loss_scale : 1.0;
  for (std::size_t k = 0; k < stats.size(); ++k) {
    const ClientStatistics& s = stats[k];
    if (s.p_image.size() != d || s.p_text.size() != d) {
      throw std::invalid_argument("router: client " + std::to_string(s.id) + " prototype dimension mismatch");
    }
    for (std::size_t c = 0; c < d; ++c) {
      tok(k, c) = s.mask[0] ? s.p_image[c] : 0.0;
      tok(k, d + c) = s.mask[1] ? s.p_text[c] : 0.0;
    }
    const auto g = s.gamma.as_array();
    for (std::size_t c = 0; c < 4; ++c) tok(k, 2 * d + c) = g[c];
    tok(k, 2 * d + 4) = s.mask[0] ? 1.0 : 0.0;
    tok(k, 2 * d + 5) = s.mask[1] ? 1.0 : 0.0;
    tok(k, 2 * d + 6) = s.loss / scale;
  }
  return tok;
}

/// normalize(p_I - p_T), or nothing when the two prototypes coincide.
inline std::optional<std::vector<double>> alignment_direction(std::span<const double> p_image,
                                                              std::span<const double> p_text) {
  std::vector<double> diff(p_image.size());
  for (std::size_t i = 0; i < diff.size(); ++i) diff[i] = p_image[i] - p_text[i];
  const double n = l2_norm(diff);
  if (n < 1e-6) return std::nullopt;
  for (double& v : diff) v /= n;
  return diff;
}

enum class GlobalProtoMode { constant, stop_gradient };

struct RouterGraph {
  ad::Graph graph;
  ParamNodes params;
  ad::NodeId weights = ad::kNoNode;   // 1 x K
  ad::NodeId proto_loss = ad::kNoNode;
  ad::NodeId align_loss = ad::kNoNode;  // kNoNode when every direction is flagged
  std::size_t flagged_directions = 0;
};

namespace detail {

inline ad::NodeId router_scores(ad::Graph& g, const ParamNodes& p, const RouterConfig& cfg,
                                ad::NodeId tokens) {
  ad::NodeId h = g.matmul(g.gelu(g.matmul(tokens, p.at("mlp.w1"))), p.at("mlp.w2"));
  const std::size_t hd = cfg.hidden / cfg.heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const std::string pre = "layer" + std::to_string(l) + ".";
    const ad::NodeId q = g.matmul(h, p.at(pre + "q"));
    const ad::NodeId k = g.matmul(h, p.at(pre + "k"));
    const ad::NodeId v = g.matmul(h, p.at(pre + "v"));
    ad::NodeId heads = ad::kNoNode;
    for (std::size_t i = 0; i < cfg.heads; ++i) {
      const ad::NodeId qi = g.slice_cols(q, i * hd, hd);
      const ad::NodeId ki = g.slice_cols(k, i * hd, hd);
      const ad::NodeId vi = g.slice_cols(v, i * hd, hd);
      const ad::NodeId att = g.softmax_rows(g.scale(g.matmul(qi, g.transpose(ki)), inv_sqrt));
      const ad::NodeId oi = g.matmul(att, vi);
      heads = heads == ad::kNoNode ? oi : g.concat_cols(heads, oi);
    }
    h = g.add(h, g.matmul(heads, p.at(pre + "o")));
    h = g.add(h, g.matmul(g.gelu(g.matmul(h, p.at(pre + "ffn1"))), p.at(pre + "ffn2")));
  }
  return g.matmul(h, p.at("head"));  // K x 1
}

inline Tensor stacked(const std::vector<std::vector<double>>& rows, std::size_t d) {
  Tensor t(rows.size(), d);
  for (std::size_t r = 0; r < rows.size(); ++r) std::copy_n(rows[r].begin(), d, t.row(r).begin());
  return t;
}

}  // namespace detail

/// Builds weights and both router losses on one graph. Router parameters are
/// graph inputs; in stop_gradient mode the global prototypes are inputs too
/// ("proto.image", "proto.text") wrapped in stop-gradient.
inline RouterGraph build_router_graph(const RouterParams& params,
                                      const std::vector<ClientStatistics>& stats,
                                      const GlobalPrototypes& protos,
                                      const RouterLossWeights& lw, double loss_scale,
                                      GlobalProtoMode mode = GlobalProtoMode::constant) {
  const RouterConfig& cfg = params.config;
  const std::size_t d = cfg.embed_dim;
  if (protos.image.size() != d || protos.text.size() != d) {
    throw std::invalid_argument("router: global prototype dimension mismatch");
  }
  RouterGraph rg;
  ad::Graph& g = rg.graph;
  for (const auto& [name, t] : params.tensors) rg.params[name] = g.input(name, t.rows(), t.cols());

  const ad::NodeId tokens = g.constant(router_tokens(stats, d, loss_scale));
  rg.weights = g.softmax_rows(g.transpose(detail::router_scores(g, rg.params, cfg, tokens)));

  ad::NodeId pbar_i, pbar_t;
  if (mode == GlobalProtoMode::stop_gradient) {
    pbar_i = g.stop_gradient(g.input("proto.image", 1, d));
    pbar_t = g.stop_gradient(g.input("proto.text", 1, d));
  } else {
    pbar_i = g.constant(Tensor::row_vector(protos.image));
    pbar_t = g.constant(Tensor::row_vector(protos.text));
  }

  // Prototype consistency with the entropy bonus.
  ad::NodeId pc = ad::kNoNode;
  for (Modality m : {Modality::image, Modality::text}) {
    std::vector<std::vector<double>> rows;
    for (const auto& s : stats) {
      const bool real = s.mask[m == Modality::image ? 0 : 1];
      rows.push_back(lw.mask_filled && !real ? std::vector<double>(d, 0.0) : s.prototype(m));
    }
    const ad::NodeId agg = g.matmul(rg.weights, g.constant(detail::stacked(rows, d)));
    const ad::NodeId cos = g.sum(g.cosine_rows(agg, m == Modality::image ? pbar_i : pbar_t));
    const double beta = m == Modality::image ? lw.beta_image : lw.beta_text;
    const ad::NodeId term = g.affine(cos, -beta, beta);
    pc = pc == ad::kNoNode ? term : g.add(pc, term);
  }
  rg.proto_loss = g.sub(pc, g.scale(g.entropy(rg.weights), lw.beta_entropy));

  // Alignment consistency over clients with a defined direction.
  std::vector<std::size_t> valid;
  std::vector<std::vector<double>> dirs;
  for (std::size_t k = 0; k < stats.size(); ++k) {
    if (auto dk = alignment_direction(stats[k].p_image, stats[k].p_text)) {
      valid.push_back(k);
      dirs.push_back(std::move(*dk));
    }
  }
  rg.flagged_directions = stats.size() - valid.size();
  if (!valid.empty()) {
    const ad::NodeId wv = g.gather_cols(rg.weights, valid);
    const ad::NodeId wn = g.div(wv, g.sum(wv));
    const ad::NodeId dk = g.constant(detail::stacked(dirs, d));
    const ad::NodeId dhat = g.l2_normalize_rows(g.matmul(wn, dk));
    const ad::NodeId dbar = g.l2_normalize_rows(g.sub(pbar_i, pbar_t));
    const ad::NodeId global_term = g.affine(g.sum(g.cosine_rows(dhat, dbar)), -1.0, 1.0);
    const ad::NodeId conflict = g.sub(g.sum(wn), g.matmul(wn, g.cosine_rows(dk, dhat)));
    rg.align_loss = g.add(global_term, conflict);
  }

  const ad::NodeId total = rg.align_loss == ad::kNoNode
                               ? rg.proto_loss
                               : g.add(rg.proto_loss, g.scale(rg.align_loss, lw.beta_align));
  g.set_output(total);
  return rg;
}

inline ad::Bindings router_bindings(const RouterParams& params, const GlobalPrototypes& protos,
                                    GlobalProtoMode mode) {
  ad::Bindings b;
  for (const auto& [name, t] : params.tensors) b[name] = t;
  if (mode == GlobalProtoMode::stop_gradient) {
    b["proto.image"] = Tensor::row_vector(protos.image);
    b["proto.text"] = Tensor::row_vector(protos.text);
  }
  return b;
}

inline std::set<std::string> router_param_names(const RouterParams& params) {
  std::set<std::string> names;
  for (const auto& [name, t] : params.tensors) names.insert(name);
  return names;
}

/// softmax over per-client scores; weights are returned in the input order.
inline std::vector<double> route(const RouterParams& params,
                                 const std::vector<ClientStatistics>& stats, double loss_scale) {
  if (stats.empty()) throw std::invalid_argument("route: no clients to weight");
  ad::Graph g;
  ParamNodes p;
  for (const auto& [name, t] : params.tensors) p[name] = g.constant(t);
  const ad::NodeId tokens = g.constant(router_tokens(stats, params.config.embed_dim, loss_scale));
  const ad::NodeId w = g.softmax_rows(g.transpose(detail::router_scores(g, p, params.config, tokens)));
  const Tensor out = ad::evaluate_node(g, {}, w);
  return {out.values().begin(), out.values().end()};
}

/// sum_v beta_v (1 - cos(sum_k w_k p_v^k, pbar_v)) - beta_4 H(w).
inline double proto_consistency_loss(std::span<const double> w,
                                     const std::vector<ClientStatistics>& stats,
                                     const GlobalPrototypes& protos, double beta_image,
                                     double beta_text, double beta_entropy,
                                     bool mask_filled = false) {
  if (w.size() != stats.size()) throw std::invalid_argument("proto_consistency_loss: one weight per client");
  ad::Graph g;
  const ad::NodeId wn = g.constant(Tensor::row_vector(w));
  ad::NodeId total = g.scale(g.entropy(wn), -beta_entropy);
  const std::size_t d = protos.image.size();
  for (Modality m : {Modality::image, Modality::text}) {
    std::vector<std::vector<double>> rows;
    for (const auto& s : stats) {
      const bool real = s.mask[m == Modality::image ? 0 : 1];
      rows.push_back(mask_filled && !real ? std::vector<double>(d, 0.0) : s.prototype(m));
    }
    const ad::NodeId agg = g.matmul(wn, g.constant(detail::stacked(rows, d)));
    const ad::NodeId cos = g.sum(g.cosine_rows(agg, g.constant(Tensor::row_vector(protos.of(m)))));
    const double beta = m == Modality::image ? beta_image : beta_text;
    total = g.add(total, g.affine(cos, -beta, beta));
  }
  g.set_output(total);
  return ad::evaluate(g, {});
}

struct AlignmentLoss {
  double value = 0.0;
  bool all_flagged = false;
};

/// 1 - cos(d_hat, d_bar) + sum_k w_k (1 - cos(d_k, d_hat)) over unflagged directions,
/// with the weights renormalized over them.
inline AlignmentLoss alignment_consistency_loss(
    std::span<const double> w, const std::vector<std::optional<std::vector<double>>>& directions,
    std::span<const double> global_dir) {
  if (w.size() != directions.size()) throw std::invalid_argument("alignment_consistency_loss: one weight per client");
  std::vector<double> wv;
  std::vector<std::vector<double>> dirs;
  for (std::size_t k = 0; k < w.size(); ++k) {
    if (!directions[k]) continue;
    wv.push_back(w[k]);
    dirs.push_back(*directions[k]);
  }
  if (dirs.empty()) return {0.0, true};
  const std::size_t d = global_dir.size();
  ad::Graph g;
  const ad::NodeId raw = g.constant(Tensor::row_vector(wv));
  const ad::NodeId wn = g.div(raw, g.sum(raw));
  const ad::NodeId dk = g.constant(detail::stacked(dirs, d));
  const ad::NodeId dhat = g.l2_normalize_rows(g.matmul(wn, dk));
  const ad::NodeId global_term =
      g.affine(g.sum(g.cosine_rows(dhat, g.constant(Tensor::row_vector(global_dir)))), -1.0, 1.0);
  g.set_output(g.add(global_term, g.sub(g.sum(wn), g.matmul(wn, g.cosine_rows(dk, dhat)))));
  return {ad::evaluate(g, {}), false};
}

inline double router_loss(const RouterParams& params, const std::vector<ClientStatistics>& stats,
                          const GlobalPrototypes& protos, const RouterLossWeights& lw,
                          double loss_scale) {
  const RouterGraph rg = build_router_graph(params, stats, protos, lw, loss_scale);
  return ad::evaluate(rg.graph, router_bindings(params, protos, GlobalProtoMode::constant));
}

struct RouterStepResult {
  std::vector<double> weights;   // weights before the step, used for this round's aggregation
  double loss = 0.0;
  bool skipped = false;          // non-finite gradient
  bool all_directions_flagged = false;
};

/// One plain gradient step on the router loss.
inline RouterStepResult router_step(RouterParams& params,
                                    const std::vector<ClientStatistics>& stats,
                                    const GlobalPrototypes& protos, const RouterLossWeights& lw,
                                    double loss_scale, double alpha,
                                    GlobalProtoMode mode = GlobalProtoMode::constant) {
  if (alpha < 0.0) throw std::invalid_argument("router_step: step size must be non-negative");
  const RouterGraph rg = build_router_graph(params, stats, protos, lw, loss_scale, mode);
  const ad::Bindings b = router_bindings(params, protos, mode);
  RouterStepResult res;
  res.all_directions_flagged = rg.align_loss == ad::kNoNode;
  const Tensor w = ad::evaluate_node(rg.graph, b, rg.weights);
  res.weights.assign(w.values().begin(), w.values().end());

  ad::ValueAndGradient vg;
  try {
    vg = ad::value_and_gradient(rg.graph, b, router_param_names(params));
  } catch (const ad::NonFiniteError&) {
    res.skipped = true;
    return res;
  }
  res.loss = vg.value;
  for (const auto& [name, grad] : vg.gradients) {
    if (!grad.all_finite()) {
      res.skipped = true;
      return res;
    }
  }
  for (auto& [name, t] : params.tensors) {
    const Tensor& grad = vg.gradients.at(name);
    for (std::size_t i = 0; i < t.size(); ++i) t[i] -= alpha * grad[i];
  }
  return res;
}

}  // namespace rcsr
