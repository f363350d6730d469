#pragma once

// Toy dual encoder: a frozen random backbone per modality with trainable
// bottleneck adapters in every block and a two-layer projection head.
// Row convention throughout: a batch is B x dim, weights are in x out.

#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "rcsr/autodiff.hpp"
#include "rcsr/common.hpp"
#include "rcsr/rng.hpp"
#include "rcsr/tensor.hpp"

namespace rcsr {

struct EncoderConfig {
  std::size_t raw_dim_image = 64;
  std::size_t raw_dim_text = 48;
  std::size_t backbone_width_image = 32;
  std::size_t backbone_width_text = 32;
  std::size_t num_blocks = 2;
  std::size_t bottleneck_dim = 8;
  std::size_t embed_dim = 16;
  bool include_bias = false;

  std::size_t raw_dim(Modality m) const {
    return m == Modality::image ? raw_dim_image : raw_dim_text;
  }
  std::size_t width(Modality m) const {
    return m == Modality::image ? backbone_width_image : backbone_width_text;
  }

  void validate() const {
    auto require = [](bool ok, const char* what) {
      if (!ok) throw std::invalid_argument(std::string("model: ") + what);
    };
    require(raw_dim_image >= 1 && raw_dim_text >= 1, "raw dims must be >= 1");
    require(backbone_width_image >= 1 && backbone_width_text >= 1, "backbone widths must be >= 1");
    require(num_blocks >= 1, "num_blocks must be >= 1");
    require(bottleneck_dim >= 1, "bottleneck_dim must be >= 1");
    require(embed_dim >= 1, "embed_dim must be >= 1");
    require(bottleneck_dim <= backbone_width_image && bottleneck_dim <= backbone_width_text,
            "bottleneck_dim must not exceed the backbone widths");
  }

  friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;
};

struct ParamCount {
  std::size_t adapters = 0;
  std::size_t heads = 0;
  std::size_t total = 0;
};

inline ParamCount param_count(const EncoderConfig& config) {
  config.validate();
  ParamCount c;
  for (Modality m : {Modality::image, Modality::text}) {
    const std::size_t w = config.width(m);
    std::size_t per_block = 2 * w * config.bottleneck_dim;
    if (config.include_bias) per_block += config.bottleneck_dim + w;
    c.adapters += config.num_blocks * per_block;
    std::size_t head = 2 * config.embed_dim * config.embed_dim;
    if (config.include_bias) head += 2 * config.embed_dim;
    c.heads += head;
  }
  c.total = c.adapters + c.heads;
  return c;
}

/// Fixed random weights for one encoder; never trained.
struct FrozenEncoder {
  std::shared_ptr<const Tensor> input_projection;   // raw_dim x width
  std::vector<std::shared_ptr<const Tensor>> mixes;  // width x width, one per block
  std::shared_ptr<const Tensor> output_projection;  // width x embed_dim
};

struct FrozenBackbone {
  EncoderConfig config;
  std::uint64_t seed = 0;
  FrozenEncoder image;
  FrozenEncoder text;

  const FrozenEncoder& encoder(Modality m) const { return m == Modality::image ? image : text; }

  static FrozenBackbone create(const EncoderConfig& config, std::uint64_t seed) {
    config.validate();
    FrozenBackbone b;
    b.config = config;
    b.seed = seed;
    for (Modality m : {Modality::image, Modality::text}) {
      Rng rng(derive_seed(seed, {stream::kBackbone, static_cast<std::uint64_t>(m)}));
      const std::size_t raw = config.raw_dim(m);
      const std::size_t w = config.width(m);
      FrozenEncoder& e = m == Modality::image ? b.image : b.text;
      e.input_projection = std::make_shared<const Tensor>(
          normal_tensor(raw, w, 1.0 / std::sqrt(static_cast<double>(raw)), rng));
      for (std::size_t k = 0; k < config.num_blocks; ++k) {
        e.mixes.push_back(std::make_shared<const Tensor>(
            normal_tensor(w, w, 0.5 / std::sqrt(static_cast<double>(w)), rng)));
      }
      e.output_projection = std::make_shared<const Tensor>(
          normal_tensor(w, config.embed_dim, 1.0 / std::sqrt(static_cast<double>(w)), rng));
    }
    return b;
  }
};

struct AdapterWeights {
  Tensor down;  // width x bottleneck
  Tensor up;    // bottleneck x width
  Tensor down_bias;
  Tensor up_bias;
};

struct HeadWeights {
  Tensor first;   // embed x embed
  Tensor second;  // embed x embed
  Tensor first_bias;
  Tensor second_bias;
};

struct EncoderWeights {
  std::vector<AdapterWeights> blocks;
  HeadWeights head;
};

/// The federated payload: adapters and heads of both encoders.
struct TrainableParams {
  EncoderConfig config;
  EncoderWeights image;
  EncoderWeights text;

  const EncoderWeights& encoder(Modality m) const { return m == Modality::image ? image : text; }

  /// Visits every tensor in the canonical (flattening) order.
  template <typename Fn>
  void for_each(Fn&& fn) {
    visit(*this, fn);
  }
  template <typename Fn>
  void for_each(Fn&& fn) const {
    visit(*this, fn);
  }

  friend bool operator==(const TrainableParams& a, const TrainableParams& b) {
    if (!(a.config == b.config)) return false;
    std::vector<const Tensor*> ta;
    std::vector<const Tensor*> tb;
    a.for_each([&](const std::string&, const Tensor& t) { ta.push_back(&t); });
    b.for_each([&](const std::string&, const Tensor& t) { tb.push_back(&t); });
    for (std::size_t i = 0; i < ta.size(); ++i)
      if (!(*ta[i] == *tb[i])) return false;
    return true;
  }

 private:
  template <typename Self, typename Fn>
  static void visit(Self& self, Fn& fn) {
    for (Modality m : {Modality::image, Modality::text}) {
      auto& enc = m == Modality::image ? self.image : self.text;
      const std::string prefix = to_string(m);
      for (std::size_t k = 0; k < enc.blocks.size(); ++k) {
        const std::string b = prefix + ".block" + std::to_string(k);
        fn(b + ".down", enc.blocks[k].down);
        fn(b + ".up", enc.blocks[k].up);
        if (self.config.include_bias) {
          fn(b + ".down_bias", enc.blocks[k].down_bias);
          fn(b + ".up_bias", enc.blocks[k].up_bias);
        }
      }
      fn(prefix + ".head.first", enc.head.first);
      fn(prefix + ".head.second", enc.head.second);
      if (self.config.include_bias) {
        fn(prefix + ".head.first_bias", enc.head.first_bias);
        fn(prefix + ".head.second_bias", enc.head.second_bias);
      }
    }
  }
};

/// All-zero parameters with the right shapes.
inline TrainableParams zero_params(const EncoderConfig& config) {
  config.validate();
  TrainableParams p;
  p.config = config;
  for (Modality m : {Modality::image, Modality::text}) {
    EncoderWeights& e = m == Modality::image ? p.image : p.text;
    const std::size_t w = config.width(m);
    const std::size_t bn = config.bottleneck_dim;
    const std::size_t d = config.embed_dim;
    e.blocks.resize(config.num_blocks);
    for (auto& blk : e.blocks) {
      blk.down = Tensor(w, bn);
      blk.up = Tensor(bn, w);
      if (config.include_bias) {
        blk.down_bias = Tensor(1, bn);
        blk.up_bias = Tensor(1, w);
      }
    }
    e.head.first = Tensor(d, d);
    e.head.second = Tensor(d, d);
    if (config.include_bias) {
      e.head.first_bias = Tensor(1, d);
      e.head.second_bias = Tensor(1, d);
    }
  }
  return p;
}

/// Up-matrices start at zero; down-matrices and heads at uniform +-0.02.
inline TrainableParams init_params(const EncoderConfig& config, std::uint64_t seed) {
  TrainableParams p = zero_params(config);
  Rng rng(derive_seed(seed, {stream::kParams}));
  for (Modality m : {Modality::image, Modality::text}) {
    EncoderWeights& e = m == Modality::image ? p.image : p.text;
    for (auto& blk : e.blocks) blk.down = uniform_tensor(blk.down.rows(), blk.down.cols(), 0.02, rng);
    e.head.first = uniform_tensor(config.embed_dim, config.embed_dim, 0.02, rng);
    e.head.second = uniform_tensor(config.embed_dim, config.embed_dim, 0.02, rng);
  }
  return p;
}

inline std::vector<double> flatten(const TrainableParams& params) {
  std::vector<double> flat;
  flat.reserve(param_count(params.config).total);
  params.for_each([&](const std::string&, const Tensor& t) {
    flat.insert(flat.end(), t.values().begin(), t.values().end());
  });
  return flat;
}

inline TrainableParams unflatten(std::span<const double> flat, const EncoderConfig& config) {
  TrainableParams p = zero_params(config);
  const std::size_t expected = param_count(config).total;
  if (flat.size() != expected) {
    throw std::invalid_argument("unflatten: expected " + std::to_string(expected) +
                                " values, got " + std::to_string(flat.size()));
  }
  std::size_t pos = 0;
  p.for_each([&](const std::string&, Tensor& t) {
    for (double& v : t.values()) v = flat[pos++];
  });
  return p;
}

namespace detail {
inline void require_same_config(const TrainableParams& a, const TrainableParams& b,
                                const char* what) {
  if (!(a.config == b.config)) throw std::invalid_argument(std::string(what) + ": config mismatch");
}
}  // namespace detail

/// a - b, tensor by tensor.
inline TrainableParams delta(const TrainableParams& a, const TrainableParams& b) {
  detail::require_same_config(a, b, "delta");
  const auto fa = flatten(a);
  auto fb = flatten(b);
  for (std::size_t i = 0; i < fa.size(); ++i) fb[i] = fa[i] - fb[i];
  return unflatten(fb, a.config);
}

/// theta + sum_k weights[k] * deltas[k], accumulated in the given order.
inline TrainableParams axpy(const TrainableParams& theta, std::span<const double> weights,
                            std::span<const TrainableParams* const> deltas) {
  if (weights.size() != deltas.size()) {
    throw std::invalid_argument("axpy: " + std::to_string(weights.size()) + " weights for " +
                                std::to_string(deltas.size()) + " deltas");
  }
  auto acc = flatten(theta);
  std::vector<double> update(acc.size(), 0.0);
  for (std::size_t k = 0; k < deltas.size(); ++k) {
    detail::require_same_config(theta, *deltas[k], "axpy");
    const auto fd = flatten(*deltas[k]);
    for (std::size_t i = 0; i < fd.size(); ++i) update[i] += weights[k] * fd[i];
  }
  for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += update[i];
  return unflatten(acc, theta.config);
}

inline double squared_distance(const TrainableParams& a, const TrainableParams& b) {
  detail::require_same_config(a, b, "squared_distance");
  const auto fa = flatten(a);
  const auto fb = flatten(b);
  double s = 0.0;
  for (std::size_t i = 0; i < fa.size(); ++i) s += (fa[i] - fb[i]) * (fa[i] - fb[i]);
  return s;
}

// ---------------------------------------------------------------------------
// Graph construction

/// Graph input ids of every trainable tensor, keyed by canonical name.
using ParamNodes = std::map<std::string, ad::NodeId>;

inline ParamNodes declare_params(ad::Graph& g, const TrainableParams& shapes) {
  ParamNodes nodes;
  shapes.for_each([&](const std::string& name, const Tensor& t) {
    nodes.emplace(name, g.input(name, t.rows(), t.cols()));
  });
  return nodes;
}

inline void bind_params(const TrainableParams& params, ad::Bindings& bindings) {
  params.for_each([&](const std::string& name, const Tensor& t) { bindings[name] = t; });
}

/// Parameter tensors as constants (for forward-only passes).
inline ParamNodes constant_params(ad::Graph& g, const TrainableParams& params) {
  ParamNodes nodes;
  params.for_each([&](const std::string& name, const Tensor& t) {
    nodes.emplace(name, g.constant(t));
  });
  return nodes;
}

/// Row-normalized embeddings of `raw` (B x raw_dim) for one modality.
inline ad::NodeId encode_node(ad::Graph& g, const ParamNodes& p, const FrozenBackbone& backbone,
                              Modality m, ad::NodeId raw) {
  const EncoderConfig& cfg = backbone.config;
  if (g.cols(raw) != cfg.raw_dim(m)) {
    throw std::invalid_argument(std::string("encode: ") + to_string(m) + " input has " +
                                std::to_string(g.cols(raw)) + " columns, expected " +
                                std::to_string(cfg.raw_dim(m)));
  }
  const FrozenEncoder& frozen = backbone.encoder(m);
  const std::string prefix = to_string(m);
  ad::NodeId h = g.matmul(raw, g.constant(frozen.input_projection));
  for (std::size_t k = 0; k < cfg.num_blocks; ++k) {
    h = g.add(h, g.gelu(g.matmul(h, g.constant(frozen.mixes[k]))));
    const std::string b = prefix + ".block" + std::to_string(k);
    ad::NodeId inner = g.matmul(h, p.at(b + ".down"));
    if (cfg.include_bias) inner = g.add(inner, p.at(b + ".down_bias"));
    ad::NodeId out = g.matmul(g.gelu(inner), p.at(b + ".up"));
    if (cfg.include_bias) out = g.add(out, p.at(b + ".up_bias"));
    h = g.add(h, out);
  }
  ad::NodeId f = g.matmul(h, g.constant(frozen.output_projection));
  ad::NodeId z = g.matmul(f, p.at(prefix + ".head.first"));
  if (cfg.include_bias) z = g.add(z, p.at(prefix + ".head.first_bias"));
  z = g.matmul(g.gelu(z), p.at(prefix + ".head.second"));
  if (cfg.include_bias) z = g.add(z, p.at(prefix + ".head.second_bias"));
  return g.l2_normalize_rows(z);
}

/// Forward-only embedding of a raw batch.
inline Tensor encode(const TrainableParams& params, const FrozenBackbone& backbone,
                     const Tensor& raw, Modality m) {
  if (raw.cols() != backbone.config.raw_dim(m)) {
    throw std::invalid_argument(std::string("encode: ") + to_string(m) + " input has " +
                                std::to_string(raw.cols()) + " columns, expected " +
                                std::to_string(backbone.config.raw_dim(m)));
  }
  ad::Graph g;
  const ParamNodes p = constant_params(g, params);
  const ad::NodeId x = g.constant(raw);
  const ad::NodeId z = encode_node(g, p, backbone, m, x);
  return ad::evaluate_node(g, {}, z);
}

}  // namespace rcsr
