#pragma once

// Round orchestration: sampling, local training fan-out, routing, fairness,
// aggregation and prototype maintenance, plus the FedAvg/FedProx baselines.

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <exception>
#include <functional>
#include <map>
#include <mutex>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "rcsr/client.hpp"
#include "rcsr/common.hpp"
#include "rcsr/data.hpp"
#include "rcsr/evaluation.hpp"
#include "rcsr/fairness.hpp"
#include "rcsr/losses.hpp"
#include "rcsr/model.hpp"
#include "rcsr/optim.hpp"
#include "rcsr/personalize.hpp"
#include "rcsr/rng.hpp"
#include "rcsr/router.hpp"

namespace rcsr {

enum class AggregationMode { fedavg, fedprox, rcsr, rcsr_p };

inline const char* to_string(AggregationMode m) {
  switch (m) {
    case AggregationMode::fedavg: return "fedavg";
    case AggregationMode::fedprox: return "fedprox";
    case AggregationMode::rcsr: return "rcsr";
    case AggregationMode::rcsr_p: return "rcsr_p";
  }
  return "?";
}

inline AggregationMode aggregation_mode_from_string(const std::string& s) {
  if (s == "fedavg") return AggregationMode::fedavg;
  if (s == "fedprox") return AggregationMode::fedprox;
  if (s == "rcsr") return AggregationMode::rcsr;
  if (s == "rcsr_p") return AggregationMode::rcsr_p;
  throw std::invalid_argument("unknown aggregation mode '" + s + "' (expected fedavg, fedprox, rcsr or rcsr_p)");
}

inline bool uses_router(AggregationMode m) {
  return m == AggregationMode::rcsr || m == AggregationMode::rcsr_p;
}

struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct TrainingConfig {
  DataConfig data;
  EncoderConfig model;
  RouterConfig router;

  std::size_t num_clients = 10;
  std::size_t rounds = 60;
  std::size_t warmup_rounds = 20;
  std::optional<std::size_t> personalize_from;  // defaults to rounds / 2
  double participation = 0.5;
  double missing_rate = 0.5;
  double dirichlet_alpha = 0.1;
  double holdout_fraction = 0.2;

  LossWeights loss;
  double lr = 1e-3;
  std::size_t lr_warmup = 5;
  std::size_t batch_size = 32;
  std::size_t local_epochs = 1;

  RouterLossWeights router_loss;
  double router_lr = 1e-3;
  FairnessConfig fairness;
  bool fairness_enabled = true;
  double proto_momentum = 0.9;
  std::size_t probe_samples = 256;

  double lambda_p = 0.2;
  double personal_lr_scale = 0.1;

  AggregationMode mode = AggregationMode::rcsr;
  std::uint64_t seed = 0;
  std::size_t workers = 1;
  std::size_t eval_every = 10;

  std::size_t personalization_round() const {
    return personalize_from.value_or(rounds / 2);
  }

  void validate() const {
    auto fail = [](const std::string& field, const std::string& why) {
      throw ConfigError(field + ": " + why);
    };
    if (num_clients == 0) fail("federation.num_clients", "must be at least 1");
    if (!(participation > 0.0 && participation <= 1.0)) fail("federation.participation", "must be in (0, 1]");
    if (static_cast<std::size_t>(std::floor(participation * static_cast<double>(num_clients) + 1e-9)) == 0) {
      fail("federation.participation", "selects no clients for num_clients = " + std::to_string(num_clients));
    }
    if (!(missing_rate >= 0.0 && missing_rate <= 1.0)) fail("federation.missing_rate", "must be in [0, 1]");
    if (!(dirichlet_alpha > 0.0)) fail("federation.dirichlet_alpha", "must be positive");
    if (!(holdout_fraction >= 0.0 && holdout_fraction < 1.0)) fail("federation.holdout_fraction", "must be in [0, 1)");
    if (rounds > 0 && warmup_rounds > rounds) fail("federation.warmup_rounds", "must not exceed rounds");
    if (!(lr >= 0.0)) fail("training.lr", "must be non-negative");
    if (batch_size == 0) fail("training.batch_size", "must be positive");
    if (local_epochs == 0) fail("training.local_epochs", "must be positive");
    if (!(loss.tau_nce > 0.0)) fail("training.tau_nce", "must be positive");
    if (loss.lambda_align < 0.0 || loss.lambda_prox < 0.0 || loss.lambda_anchor < 0.0) {
      fail("training", "lambda coefficients must be non-negative");
    }
    if (!(router_lr >= 0.0)) fail("router.lr", "must be non-negative");
    if (!(proto_momentum >= 0.0 && proto_momentum <= 1.0)) fail("prototypes.momentum", "must be in [0, 1]");
    if (fairness.eta_q < 0.0) fail("fairness.eta_q", "must be non-negative");
    if (!(fairness.group_momentum >= 0.0 && fairness.group_momentum <= 1.0)) {
      fail("fairness.group_momentum", "must be in [0, 1]");
    }
    if (!(lambda_p > 0.0)) fail("personalization.lambda_p", "must be positive");
    if (!(personal_lr_scale >= 0.0)) fail("personalization.lr_scale", "must be non-negative");
    if (probe_samples == 0) fail("prototypes.probe_samples", "must be positive");
    if (workers == 0) fail("workers", "must be at least 1");
    if (router.embed_dim != model.embed_dim) fail("router.embed_dim", "must equal model.embed_dim");
    if (model.raw_dim_image != data.raw_dim_image || model.raw_dim_text != data.raw_dim_text) {
      fail("model", "raw dimensions must match the data");
    }
    try {
      data.validate();
      model.validate();
      router.validate();
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
  }
};

/// Immutable world shared by every round: backbone, clients and test set.
struct Federation {
  TrainingConfig config;
  FrozenBackbone backbone;
  SyntheticDataset train;
  SyntheticDataset test;
  std::vector<ClientState> clients;
};

inline Federation build_federation(const TrainingConfig& cfg) {
  cfg.validate();
  Federation fed;
  fed.config = cfg;
  fed.backbone = FrozenBackbone::create(cfg.model, derive_seed(cfg.seed, {stream::kBackbone}));
  TrainTestData data = generate_dataset(cfg.data, derive_seed(cfg.seed, {stream::kData}));
  fed.train = std::move(data.train);
  fed.test = std::move(data.test);

  Rng rng(derive_seed(cfg.seed, {stream::kPartition}));
  const auto parts = dirichlet_partition(fed.train.labels, cfg.num_clients, cfg.dirichlet_alpha, rng);
  const auto types = assign_modalities(cfg.num_clients, cfg.missing_rate, rng);
  for (std::size_t k = 0; k < cfg.num_clients; ++k) {
    const HoldoutSplit split = split_holdout(parts[k], cfg.holdout_fraction, rng);
    ClientState c;
    c.id = k;
    c.type = types[k];
    c.train = subset(fed.train, split.train);
    c.test = subset(fed.train, split.test);
    fed.clients.push_back(std::move(c));
  }
  return fed;
}

struct ServerState {
  std::size_t round = 0;
  TrainableParams theta;
  GlobalPrototypes protos;
  RouterParams router;
  FairnessState fairness;
  std::vector<double> prev_update;   // flattened theta_t - theta_{t-1}
  double loss_sum = 0.0;             // running mean of every reported loss
  std::size_t loss_count = 0;
  std::map<std::size_t, PersonalAdapter> adapters;
  std::map<std::size_t, double> strengths;

  double loss_scale() const {
    return loss_count == 0 ? 1.0 : loss_sum / static_cast<double>(loss_count);
  }
};

/// Initial prototypes from a seeded probe batch pushed through the initial model.
inline GlobalPrototypes probe_prototypes(const Federation& fed, const TrainableParams& theta) {
  const std::size_t n = fed.train.size();
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(derive_seed(fed.config.seed, {stream::kProbe}));
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(std::min(n, fed.config.probe_samples));
  std::sort(idx.begin(), idx.end());
  const SyntheticDataset probe = subset(fed.train, idx);
  GlobalPrototypes p;
  p.momentum = fed.config.proto_momentum;
  p.image = compute_prototype(encode(theta, fed.backbone, probe.image, Modality::image));
  p.text = compute_prototype(encode(theta, fed.backbone, probe.text, Modality::text));
  return p;
}

inline ServerState initial_state(const Federation& fed) {
  const TrainingConfig& cfg = fed.config;
  ServerState s;
  s.theta = init_params(cfg.model, derive_seed(cfg.seed, {stream::kParams}));
  s.protos = probe_prototypes(fed, s.theta);
  s.router = init_router(cfg.router, derive_seed(cfg.seed, {stream::kRouter}));
  s.fairness = FairnessState::uniform(cfg.num_clients, cfg.fairness);
  return s;
}

// --- round building blocks -------------------------------------------------------

inline std::vector<std::size_t> sample_clients(std::size_t n, double participation, Rng& rng) {
  const auto m = static_cast<std::size_t>(std::floor(participation * static_cast<double>(n) + 1e-9));
  if (m == 0) throw std::invalid_argument("sample_clients: participation selects no clients");
  if (m > n) throw std::invalid_argument("sample_clients: participation above 1");
  std::vector<std::size_t> ids(n);
  std::iota(ids.begin(), ids.end(), 0);
  std::shuffle(ids.begin(), ids.end(), rng);
  ids.resize(m);
  std::sort(ids.begin(), ids.end());
  return ids;
}

/// theta + sum_k w_k delta_k, accumulated in ascending client id.
inline TrainableParams aggregate(const TrainableParams& theta,
                                 const std::map<std::size_t, TrainableParams>& deltas,
                                 const std::map<std::size_t, double>& weights) {
  if (deltas.size() != weights.size()) throw std::invalid_argument("aggregate: one weight per delta");
  std::vector<double> w;
  std::vector<const TrainableParams*> d;
  for (const auto& [id, delta_k] : deltas) {
    const auto it = weights.find(id);
    if (it == weights.end()) throw std::invalid_argument("aggregate: no weight for client " + std::to_string(id));
    w.push_back(it->second);
    d.push_back(&delta_k);
  }
  return axpy(theta, w, d);
}

struct EmaResult {
  GlobalPrototypes protos;
  bool kept_image = false;  // update was degenerate, previous prototype kept
  bool kept_text = false;
};

/// pbar <- mu pbar + (1 - mu) sum_k w_k p_k, renormalized.
inline EmaResult ema_update(const GlobalPrototypes& protos, const std::vector<ClientStatistics>& stats,
                            const std::vector<double>& w, double mu) {
  if (w.size() != stats.size()) throw std::invalid_argument("ema_update: one weight per client");
  EmaResult r;
  r.protos = protos;
  r.protos.momentum = mu;
  for (Modality m : {Modality::image, Modality::text}) {
    std::vector<double> v(protos.of(m).size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = mu * protos.of(m)[i];
    for (std::size_t k = 0; k < stats.size(); ++k) {
      const auto& p = stats[k].prototype(m);
      for (std::size_t i = 0; i < v.size(); ++i) v[i] += (1.0 - mu) * w[k] * p[i];
    }
    const double n = l2_norm(v);
    if (n < ad::kDegenerateNorm) {
      (m == Modality::image ? r.kept_image : r.kept_text) = true;
      continue;
    }
    for (double& x : v) x /= n;
    r.protos.of(m) = std::move(v);
  }
  return r;
}

/// Runs fn(i) for i in [0, n) on up to `workers` threads. The first exception
/// is rethrown after all threads join.
inline void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn) {
  if (workers <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mu;
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < std::min(workers, n); ++t) {
    pool.emplace_back([&] {
      for (std::size_t i; (i = next.fetch_add(1)) < n;) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(error_mu);
          if (!error) error = std::current_exception();
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

struct RoundRecord {
  std::size_t round = 0;
  std::string mode;                       // aggregation rule actually applied this round
  std::vector<std::size_t> selected;
  std::vector<std::size_t> active;        // selected clients that trained
  std::vector<double> router_weights;     // over active, ascending id
  std::vector<double> q;                  // snapshot over all N after this round
  std::vector<double> fused_weights;      // over active
  std::map<std::size_t, double> losses;
  double mean_loss = 0.0;
  std::optional<double> router_loss;
  double weight_entropy = 0.0;
  double q_entropy = 0.0;
  std::optional<RetrievalMetrics> metrics;
  std::vector<std::string> events;
  double wall_seconds = 0.0;
};

inline LossWeights round_loss_weights(const TrainingConfig& cfg, std::size_t t) {
  LossWeights w = cfg.loss;
  const bool proximal = cfg.mode == AggregationMode::fedprox ||
                        (uses_router(cfg.mode) && t > cfg.warmup_rounds);
  if (!proximal) w.lambda_prox = 0.0;
  return w;
}

inline std::map<std::size_t, PersonalView> personal_views(const ServerState& s) {
  std::map<std::size_t, PersonalView> views;
  for (const auto& [id, a] : s.adapters) views[id] = PersonalView{&a, s.strengths.at(id)};
  return views;
}

inline RetrievalMetrics evaluate_state(const Federation& fed, const ServerState& s) {
  return evaluate(s.theta, fed.backbone, fed.test, fed.clients, personal_views(s));
}

inline RoundRecord run_round(const Federation& fed, ServerState& state, std::size_t t) {
  const TrainingConfig& cfg = fed.config;
  if (t == 0 || t > cfg.rounds) throw std::out_of_range("run_round: round " + std::to_string(t) + " outside [1, T]");
  const auto started = std::chrono::steady_clock::now();
  RoundRecord rec;
  rec.round = t;
  const bool routed = uses_router(cfg.mode) && t > cfg.warmup_rounds;
  rec.mode = routed ? to_string(cfg.mode)
                    : (cfg.mode == AggregationMode::fedprox ? "fedprox" : "fedavg");

  Rng sample_rng(derive_seed(cfg.seed, {stream::kSampling, t}));
  rec.selected = sample_clients(cfg.num_clients, cfg.participation, sample_rng);

  // Phase 1: local training, fanned out, consumed in ascending id.
  LocalTrainConfig ltc;
  ltc.lr = scheduled_lr(cfg.lr, t, cfg.rounds, cfg.lr_warmup);
  ltc.batch_size = cfg.batch_size;
  ltc.local_epochs = cfg.local_epochs;
  ltc.loss = round_loss_weights(cfg, t);
  const GlobalPrototypes broadcast = state.protos;
  std::vector<LocalTrainResult> results(rec.selected.size());
  std::vector<std::optional<ClientStatistics>> stats_slots(rec.selected.size());
  parallel_for(rec.selected.size(), cfg.workers, [&](std::size_t i) {
    const ClientState& c = fed.clients[rec.selected[i]];
    results[i] = local_train(state.theta, c, fed.backbone, broadcast, ltc,
                             derive_seed(cfg.seed, {stream::kClient, t, c.id}));
    if (results[i].skipped) return;
    stats_slots[i] = build_statistics(c, results[i].theta, state.theta, fed.backbone, broadcast,
                                      results[i].mean_loss, results[i].steps, state.prev_update);
  });

  std::vector<ClientStatistics> stats;
  std::map<std::size_t, TrainableParams> deltas;
  for (std::size_t i = 0; i < rec.selected.size(); ++i) {
    if (results[i].skipped) {
      rec.events.push_back("client " + std::to_string(rec.selected[i]) + " skipped: no local data");
      continue;
    }
    rec.active.push_back(rec.selected[i]);
    rec.losses[rec.selected[i]] = results[i].mean_loss;
    stats.push_back(std::move(*stats_slots[i]));
    deltas.emplace(rec.selected[i], delta(results[i].theta, state.theta));
  }
  if (rec.active.empty()) {
    rec.events.push_back("round " + std::to_string(t) + " is a no-op: every selected client was skipped");
    rec.q = state.fairness.q;
    rec.q_entropy = simplex_entropy(rec.q);
    state.round = t;
    return rec;
  }
  for (const auto& [id, l] : rec.losses) {
    rec.mean_loss += l;
    state.loss_sum += l;
    ++state.loss_count;
  }
  rec.mean_loss /= static_cast<double>(rec.losses.size());

  // Phase 2: routing.
  if (routed) {
    const RouterStepResult rs = router_step(state.router, stats, broadcast, cfg.router_loss,
                                            state.loss_scale(), cfg.router_lr);
    rec.router_weights = rs.weights;
    rec.router_loss = rs.loss;
    if (rs.skipped) rec.events.push_back("router step skipped: non-finite gradient");
    if (rs.all_directions_flagged) rec.events.push_back("alignment loss: every direction zero-flagged");
  } else {
    double total = 0.0;
    for (const auto& s : stats) total += static_cast<double>(s.num_samples);
    for (const auto& s : stats) rec.router_weights.push_back(static_cast<double>(s.num_samples) / total);
  }
  rec.weight_entropy = simplex_entropy(rec.router_weights);

  // Phase 3: fairness.
  std::vector<std::pair<ModalityType, double>> group_losses;
  for (const auto& s : stats) group_losses.emplace_back(s.type, s.loss);
  if (routed && cfg.fairness_enabled) {
    std::vector<std::pair<std::size_t, double>> normalized;
    if (cfg.fairness.zscore) {
      const auto z = zscore_losses(group_losses);
      for (std::size_t i = 0; i < stats.size(); ++i) normalized.emplace_back(stats[i].id, z[i]);
    } else {
      for (const auto& s : stats) {
        const NormalizedLoss nl = normalize_loss(s.loss, s.type, state.fairness);
        if (nl.clamped) rec.events.push_back("group mean loss clamped for client " + std::to_string(s.id));
        normalized.emplace_back(s.id, nl.value);
      }
    }
    const QUpdate qu = update_q(state.fairness, normalized);
    if (qu.clamped_exponents > 0) {
      rec.events.push_back("fairness exponent clamped for " + std::to_string(qu.clamped_exponents) + " client(s)");
    }
    rec.fused_weights = fuse_weights(rec.router_weights, state.fairness.q, rec.active);
  } else {
    rec.fused_weights = rec.router_weights;
  }
  update_group_means(state.fairness, group_losses);
  rec.q = state.fairness.q;
  rec.q_entropy = simplex_entropy(rec.q);

  // Aggregation and prototype EMA.
  std::map<std::size_t, double> wmap;
  for (std::size_t i = 0; i < rec.active.size(); ++i) wmap[rec.active[i]] = rec.fused_weights[i];
  const TrainableParams next = aggregate(state.theta, deltas, wmap);
  state.prev_update = flatten(delta(next, state.theta));
  const EmaResult ema = ema_update(state.protos, stats, rec.fused_weights, cfg.proto_momentum);
  if (ema.kept_image) rec.events.push_back("image prototype update degenerate; previous kept");
  if (ema.kept_text) rec.events.push_back("text prototype update degenerate; previous kept");

  // Personalization reads the broadcast model and never touches the payload.
  if (cfg.mode == AggregationMode::rcsr_p && t >= cfg.personalization_round()) {
    for (std::size_t i = 0; i < rec.active.size(); ++i) {
      const std::size_t id = rec.active[i];
      if (!state.adapters.count(id)) {
        state.adapters.emplace(id, init_personal_adapter(cfg.model.embed_dim,
                                                         derive_seed(cfg.seed, {stream::kAdapterInit, id})));
      }
      state.strengths[id] = personalization_strength(rec.router_weights[i], cfg.lambda_p);
    }
    PersonalTuneConfig ptc;
    ptc.lr = cfg.personal_lr_scale * ltc.lr;
    ptc.batch_size = cfg.batch_size;
    ptc.tau_nce = cfg.loss.tau_nce;
    std::vector<PersonalTuneResult> tuned(rec.active.size());
    parallel_for(rec.active.size(), cfg.workers, [&](std::size_t i) {
      const std::size_t id = rec.active[i];
      tuned[i] = personal_finetune(fed.clients[id], state.adapters.at(id), state.theta, fed.backbone,
                                   broadcast, state.strengths.at(id), ptc,
                                   derive_seed(cfg.seed, {stream::kPersonal, t, id}));
    });
    for (std::size_t i = 0; i < rec.active.size(); ++i) state.adapters[rec.active[i]] = std::move(tuned[i].adapter);
  }

  state.theta = next;
  state.protos = ema.protos;
  state.round = t;

  if ((cfg.eval_every > 0 && t % cfg.eval_every == 0) || t == cfg.rounds) {
    rec.metrics = evaluate_state(fed, state);
    for (std::size_t id : rec.metrics->excluded_clients) {
      rec.events.push_back("client " + std::to_string(id) + " slice below " + std::to_string(kMinSlicePairs) +
                           " pairs; excluded from fairness stats");
    }
  }
  rec.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return rec;
}

struct TrainingResult {
  ServerState state;
  std::vector<RoundRecord> history;
  RetrievalMetrics final_metrics;
};

using RoundCallback = std::function<void(const RoundRecord&, const ServerState&)>;

/// Runs rounds state.round + 1 .. T.
inline TrainingResult continue_training(const Federation& fed, ServerState state,
                                        const RoundCallback& on_round = {}) {
  TrainingResult out;
  for (std::size_t t = state.round + 1; t <= fed.config.rounds; ++t) {
    try {
      out.history.push_back(run_round(fed, state, t));
    } catch (const std::exception& e) {
      throw std::runtime_error("round " + std::to_string(t) + ": " + e.what());
    }
    if (on_round) on_round(out.history.back(), state);
  }
  out.final_metrics = out.history.empty() || !out.history.back().metrics
                          ? evaluate_state(fed, state)
                          : *out.history.back().metrics;
  out.state = std::move(state);
  return out;
}

inline TrainingResult run_training(const TrainingConfig& cfg, const RoundCallback& on_round = {}) {
  const Federation fed = build_federation(cfg);
  return continue_training(fed, initial_state(fed), on_round);
}

}  // namespace rcsr
