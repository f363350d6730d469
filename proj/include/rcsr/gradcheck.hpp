#pragma once

// Finite-difference checks for every differentiable objective in the library,
// run over a set of random seeds at small dimensions (d = 8, batch 4).

#include <algorithm>
#include <chrono>
#include <functional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "rcsr/autodiff.hpp"
#include "rcsr/client.hpp"
#include "rcsr/losses.hpp"
#include "rcsr/model.hpp"
#include "rcsr/personalize.hpp"
#include "rcsr/router.hpp"

namespace rcsr {

inline constexpr double kGradcheckTolerance = 1e-4;
inline constexpr double kGradcheckStep = 1e-5;
inline constexpr std::size_t kGradcheckDim = 8;
inline constexpr std::size_t kGradcheckBatch = 4;

struct GradcheckCase {
  std::string name;
  std::function<double(std::uint64_t seed)> run;  // worst relative error for one seed
};

namespace detail {

inline Tensor gc_tensor(std::size_t rows, std::size_t cols, Rng& rng, double scale = 1.0) {
  return uniform_tensor(rows, cols, scale, rng);
}

inline Tensor gc_unit_rows(std::size_t rows, std::size_t cols, Rng& rng) {
  Tensor t = gc_tensor(rows, cols, rng);
  for (std::size_t r = 0; r < rows; ++r) {
    const double n = l2_norm(t.row(r));
    for (double& v : t.row(r)) v /= n;
  }
  return t;
}

inline std::vector<double> gc_unit(std::size_t d, Rng& rng) {
  const Tensor t = gc_unit_rows(1, d, rng);
  return {t.values().begin(), t.values().end()};
}

inline EncoderConfig gc_encoder_config() {
  EncoderConfig c;
  c.raw_dim_image = 6;
  c.raw_dim_text = 5;
  c.backbone_width_image = 5;
  c.backbone_width_text = 4;
  c.num_blocks = 2;
  c.bottleneck_dim = 3;
  c.embed_dim = kGradcheckDim;
  return c;
}

inline double gc_client_loss(ModalityType type, std::uint64_t seed) {
  const EncoderConfig cfg = gc_encoder_config();
  const FrozenBackbone backbone = FrozenBackbone::create(cfg, seed);
  Rng rng(derive_seed(seed, {11}));
  TrainableParams theta = init_params(cfg, seed);
  // Non-zero up-projections so every tensor receives gradient.
  theta.for_each([&](const std::string&, Tensor& t) { t = gc_tensor(t.rows(), t.cols(), rng, 0.5); });
  TrainableParams reference = theta;
  reference.for_each([&](const std::string&, Tensor& t) {
    for (double& v : t.values()) v += 0.1 * std::uniform_real_distribution<double>(-1.0, 1.0)(rng);
  });
  const GlobalPrototypes protos{gc_unit(kGradcheckDim, rng), gc_unit(kGradcheckDim, rng), 0.9};
  LossWeights w;
  w.tau_nce = 0.5;  // keeps the softmax away from saturation at this scale
  w.lambda_prox = 0.01;
  Batch batch;
  if (has_modality(type, Modality::image)) batch.image = gc_tensor(kGradcheckBatch, cfg.raw_dim_image, rng);
  if (has_modality(type, Modality::text)) batch.text = gc_tensor(kGradcheckBatch, cfg.raw_dim_text, rng);
  const ClientLossGraph lg = build_client_loss_graph(backbone, batch, type, protos, reference, w);
  ad::Bindings b;
  bind_params(theta, b);
  std::set<std::string> wrt;
  for (const auto& [name, id] : lg.params) wrt.insert(name);
  return ad::check_gradients(lg.graph, b, wrt, kGradcheckStep);
}

inline std::vector<ClientStatistics> gc_router_stats(std::size_t k, const GlobalPrototypes& protos, Rng& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<ClientStatistics> out;
  for (std::size_t i = 0; i < k; ++i) {
    ClientStatistics s;
    s.id = i;
    s.type = i % 3 == 1 ? ModalityType::image_only : (i % 4 == 2 ? ModalityType::text_only : ModalityType::paired);
    s.mask = modality_mask(s.type);
    s.p_image = s.mask[0] ? gc_unit(kGradcheckDim, rng) : protos.image;
    s.p_text = s.mask[1] ? gc_unit(kGradcheckDim, rng) : protos.text;
    s.gamma = UpdateGeometry{u(rng), 0.1 * u(rng), 2.0 * u(rng) - 1.0, 0.01 * u(rng)};
    s.loss = 1.0 + u(rng);
    s.num_samples = 10 + i;
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace detail

/// Every registered graph. Each case draws its own inputs from the seed.
inline std::vector<GradcheckCase> gradcheck_cases() {
  using namespace detail;
  constexpr std::size_t d = kGradcheckDim;
  constexpr std::size_t B = kGradcheckBatch;
  std::vector<GradcheckCase> cases;

  cases.push_back({"info_nce", [](std::uint64_t seed) {
                     Rng rng(seed);
                     ad::Graph g;
                     const auto zi = g.input("zi", B, d);
                     const auto zt = g.input("zt", B, d);
                     g.set_output(info_nce_node(g, g.l2_normalize_rows(zi), g.l2_normalize_rows(zt), 0.07));
                     return ad::check_gradients(g, {{"zi", gc_tensor(B, d, rng)}, {"zt", gc_tensor(B, d, rng)}},
                                                {"zi", "zt"}, kGradcheckStep);
                   }});

  cases.push_back({"anchor", [](std::uint64_t seed) {
                     Rng rng(seed);
                     ad::Graph g;
                     const auto z = g.input("z", B, d);
                     const auto a = g.input("anchor", 1, d);
                     g.set_output(anchor_node(g, g.l2_normalize_rows(z), g.stop_gradient(a)));
                     return ad::check_gradients(g, {{"z", gc_tensor(B, d, rng)}, {"anchor", gc_unit_rows(1, d, rng)}},
                                                {"z"}, kGradcheckStep);
                   }});

  cases.push_back({"reg_drift_prox", [](std::uint64_t seed) {
                     Rng rng(seed);
                     ad::Graph g;
                     const auto zi = g.input("zi", B, d);
                     const auto zt = g.input("zt", B, d);
                     const auto w = g.input("w", 3, 3);
                     const auto drift = g.add(
                         prototype_drift_node(g, g.l2_normalize_rows(zi), g.constant(gc_unit_rows(1, d, rng))),
                         prototype_drift_node(g, g.l2_normalize_rows(zt), g.constant(gc_unit_rows(1, d, rng))));
                     const auto prox = g.squared_norm(g.sub(w, g.constant(gc_tensor(3, 3, rng))));
                     g.set_output(g.add(g.scale(drift, 0.05), g.scale(prox, 0.01)));
                     return ad::check_gradients(
                         g, {{"zi", gc_tensor(B, d, rng)}, {"zt", gc_tensor(B, d, rng)}, {"w", gc_tensor(3, 3, rng)}},
                         {"zi", "zt", "w"}, kGradcheckStep);
                   }});

  for (ModalityType type : {ModalityType::paired, ModalityType::image_only, ModalityType::text_only}) {
    cases.push_back({std::string("client_loss.") + to_string(type),
                     [type](std::uint64_t seed) { return gc_client_loss(type, seed); }});
  }

  cases.push_back({"router", [](std::uint64_t seed) {
                     Rng rng(derive_seed(seed, {21}));
                     RouterConfig cfg;
                     cfg.embed_dim = d;
                     cfg.hidden = 8;
                     cfg.heads = 2;
                     cfg.init_scale = 0.4;
                     RouterParams router = init_router(cfg, seed);
                     router.tensors["head"] = uniform_tensor(cfg.hidden, 1, 0.5, rng);
                     const GlobalPrototypes protos{gc_unit(d, rng), gc_unit(d, rng), 0.9};
                     const auto stats = gc_router_stats(B, protos, rng);
                     const RouterGraph rg = build_router_graph(router, stats, protos, {}, 1.3);
                     std::set<std::string> wrt;
                     for (const auto& [name, t] : router.tensors) wrt.insert(name);
                     return ad::check_gradients(rg.graph, router_bindings(router, protos, GlobalProtoMode::constant),
                                                wrt, kGradcheckStep);
                   }});

  for (ModalityType type : {ModalityType::paired, ModalityType::image_only, ModalityType::text_only}) {
    cases.push_back({std::string("personal_adapter.") + to_string(type), [type](std::uint64_t seed) {
                       Rng rng(derive_seed(seed, {31}));
                       PersonalAdapter a = init_personal_adapter(d, seed);
                       a.for_each([&](const std::string&, Tensor& t) { t = gc_tensor(t.rows(), t.cols(), rng, 0.5); });
                       const GlobalPrototypes protos{gc_unit(d, rng), gc_unit(d, rng), 0.9};
                       const Tensor zi = gc_unit_rows(B, d, rng);
                       const Tensor zt = gc_unit_rows(B, d, rng);
                       const PersonalLossGraph lg = build_personal_loss_graph(a, type, zi, zt, protos, 0.4, 0.07);
                       ad::Bindings b;
                       a.for_each([&](const std::string& n, const Tensor& t) { b[n] = t; });
                       return ad::check_gradients(lg.graph, b, lg.params, kGradcheckStep);
                     }});
  }
  return cases;
}

struct GradcheckReport {
  struct Line {
    std::string name;
    double worst = 0.0;
    std::uint64_t worst_seed = 0;
    bool passed = false;
    std::string error;  // set when a case threw
  };
  std::vector<Line> lines;
  double seconds = 0.0;

  bool passed() const {
    return std::all_of(lines.begin(), lines.end(), [](const Line& l) { return l.passed; });
  }
};

/// Runs every case over seeds 0 .. num_seeds - 1. Exceptions become failed lines.
inline GradcheckReport run_gradcheck(std::size_t num_seeds = 20, double tolerance = kGradcheckTolerance) {
  const auto started = std::chrono::steady_clock::now();
  GradcheckReport report;
  for (const GradcheckCase& c : gradcheck_cases()) {
    GradcheckReport::Line line;
    line.name = c.name;
    try {
      for (std::uint64_t seed = 0; seed < num_seeds; ++seed) {
        const double err = c.run(seed);
        // A NaN error must fail, so compare with the negated form.
        if (!(err <= line.worst)) {
          line.worst = err;
          line.worst_seed = seed;
        }
      }
      line.passed = line.worst <= tolerance;
    } catch (const std::exception& e) {
      line.error = e.what();
    }
    report.lines.push_back(std::move(line));
  }
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return report;
}

}  // namespace rcsr
