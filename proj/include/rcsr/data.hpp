#pragma once

// Synthetic paired corpus, non-IID partitioning and Recall@K.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "rcsr/common.hpp"
#include "rcsr/rng.hpp"
#include "rcsr/tensor.hpp"

namespace rcsr {

struct DataConfig {
  std::size_t num_classes = 20;
  std::size_t per_class = 100;
  std::size_t test_per_class = 25;
  std::size_t latent_dim = 32;
  std::size_t raw_dim_image = 64;
  std::size_t raw_dim_text = 48;
  double noise = 0.5;       // item spread around its class centre, in latent space
  double raw_noise = 0.1;   // observation noise added to each raw view

  void validate() const {
    if (num_classes == 0 || latent_dim == 0 || raw_dim_image == 0 || raw_dim_text == 0) {
      throw std::invalid_argument("data: class count and dimensions must be positive");
    }
    if (noise < 0.0 || raw_noise < 0.0) throw std::invalid_argument("data: noise must be >= 0");
  }
  friend bool operator==(const DataConfig&, const DataConfig&) = default;
};

/// Fixed generative world: class centres plus the two observation maps.
struct SyntheticWorld {
  Tensor centers;      // num_classes x latent
  Tensor map_image;    // latent x raw_image
  Tensor map_text;     // latent x raw_text

  static SyntheticWorld create(const DataConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Rng rng(derive_seed(seed, {0x57}));
    SyntheticWorld w;
    w.centers = normal_tensor(cfg.num_classes, cfg.latent_dim, 1.0, rng);
    const double s = 1.0 / std::sqrt(static_cast<double>(cfg.latent_dim));
    w.map_image = normal_tensor(cfg.latent_dim, cfg.raw_dim_image, s, rng);
    w.map_text = normal_tensor(cfg.latent_dim, cfg.raw_dim_text, s, rng);
    return w;
  }
};

struct SyntheticDataset {
  std::vector<std::size_t> labels;
  Tensor latents;
  Tensor image;   // one row per item
  Tensor text;
  std::size_t num_classes = 0;

  std::size_t size() const { return labels.size(); }
};

namespace detail {

inline Tensor project(const Tensor& u, const Tensor& map, double noise, Rng& rng) {
  Tensor out(u.rows(), map.cols());
  std::normal_distribution<double> eps(0.0, 1.0);
  for (std::size_t i = 0; i < u.rows(); ++i) {
    for (std::size_t j = 0; j < map.cols(); ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < u.cols(); ++k) acc += u(i, k) * map(k, j);
      out(i, j) = acc + (noise > 0.0 ? noise * eps(rng) : 0.0);
    }
  }
  return out;
}

}  // namespace detail

/// Draws per_class items for every class from the world; items are laid out
/// class by class.
inline SyntheticDataset sample_items(const SyntheticWorld& world, const DataConfig& cfg,
                                     std::size_t per_class, Rng& rng) {
  cfg.validate();
  const std::size_t n = cfg.num_classes * per_class;
  SyntheticDataset ds;
  ds.num_classes = cfg.num_classes;
  ds.labels.resize(n);
  ds.latents = Tensor(n, cfg.latent_dim);
  std::normal_distribution<double> eps(0.0, 1.0);
  for (std::size_t c = 0, i = 0; c < cfg.num_classes; ++c) {
    for (std::size_t j = 0; j < per_class; ++j, ++i) {
      ds.labels[i] = c;
      for (std::size_t k = 0; k < cfg.latent_dim; ++k) {
        ds.latents(i, k) = world.centers(c, k) + (cfg.noise > 0.0 ? cfg.noise * eps(rng) : 0.0);
      }
    }
  }
  ds.image = detail::project(ds.latents, world.map_image, cfg.raw_noise, rng);
  ds.text = detail::project(ds.latents, world.map_text, cfg.raw_noise, rng);
  return ds;
}

struct TrainTestData {
  SyntheticDataset train;
  SyntheticDataset test;
};

/// Training and test sets share the world but use independent streams.
inline TrainTestData generate_dataset(const DataConfig& cfg, std::uint64_t seed) {
  const SyntheticWorld world = SyntheticWorld::create(cfg, seed);
  Rng train_rng(derive_seed(seed, {0x58, 1}));
  Rng test_rng(derive_seed(seed, {0x58, 2}));
  return {sample_items(world, cfg, cfg.per_class, train_rng),
          sample_items(world, cfg, cfg.test_per_class, test_rng)};
}

inline SyntheticDataset subset(const SyntheticDataset& ds, const std::vector<std::size_t>& idx) {
  SyntheticDataset out;
  out.num_classes = ds.num_classes;
  out.latents = Tensor(idx.size(), ds.latents.cols());
  out.image = Tensor(idx.size(), ds.image.cols());
  out.text = Tensor(idx.size(), ds.text.cols());
  for (std::size_t r = 0; r < idx.size(); ++r) {
    const std::size_t i = idx[r];
    if (i >= ds.size()) throw std::out_of_range("subset: index out of range");
    out.labels.push_back(ds.labels[i]);
    std::copy_n(ds.latents.row(i).begin(), ds.latents.cols(), out.latents.row(r).begin());
    std::copy_n(ds.image.row(i).begin(), ds.image.cols(), out.image.row(r).begin());
    std::copy_n(ds.text.row(i).begin(), ds.text.cols(), out.text.row(r).begin());
  }
  return out;
}

// --- partitioning -------------------------------------------------------------

inline std::vector<double> sample_dirichlet(std::size_t n, double alpha, Rng& rng) {
  std::gamma_distribution<double> gamma(alpha, 1.0);
  std::vector<double> p(n);
  double total = 0.0;
  for (double& v : p) total += (v = gamma(rng));
  if (!(total > 0.0)) {
    // Every draw underflowed; the limit of Dir(alpha -> 0) is a random vertex.
    std::fill(p.begin(), p.end(), 0.0);
    p[std::uniform_int_distribution<std::size_t>(0, n - 1)(rng)] = 1.0;
    return p;
  }
  for (double& v : p) v /= total;
  return p;
}

/// Per class, split that class's items across clients by Dir(alpha) shares.
inline std::vector<std::vector<std::size_t>> dirichlet_partition(
    const std::vector<std::size_t>& labels, std::size_t num_clients, double alpha, Rng& rng) {
  if (!(alpha > 0.0)) throw std::invalid_argument("dirichlet_partition: alpha must be positive");
  if (num_clients == 0) throw std::invalid_argument("dirichlet_partition: need at least one client");
  if (num_clients > labels.size()) {
    throw std::invalid_argument("dirichlet_partition: more clients (" + std::to_string(num_clients) +
                                ") than items (" + std::to_string(labels.size()) + ")");
  }
  const std::size_t num_classes =
      labels.empty() ? 0 : *std::max_element(labels.begin(), labels.end()) + 1;
  std::vector<std::vector<std::size_t>> by_class(num_classes);
  for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(i);

  std::vector<std::vector<std::size_t>> parts(num_clients);
  for (auto& items : by_class) {
    if (items.empty()) continue;
    std::shuffle(items.begin(), items.end(), rng);
    const std::vector<double> p = sample_dirichlet(num_clients, alpha, rng);
    std::vector<std::size_t> counts(num_clients);
    std::size_t assigned = 0;
    for (std::size_t k = 0; k < num_clients; ++k) {
      counts[k] = static_cast<std::size_t>(std::floor(p[k] * static_cast<double>(items.size())));
      assigned += counts[k];
    }
    // Largest remainder first; ties go to the larger share, then the lower id.
    std::vector<std::size_t> order(num_clients);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      const double ra = p[a] * static_cast<double>(items.size()) - static_cast<double>(counts[a]);
      const double rb = p[b] * static_cast<double>(items.size()) - static_cast<double>(counts[b]);
      if (ra != rb) return ra > rb;
      return p[a] > p[b];
    });
    for (std::size_t i = 0; assigned < items.size(); ++i, ++assigned) ++counts[order[i % num_clients]];
    std::size_t pos = 0;
    for (std::size_t k = 0; k < num_clients; ++k) {
      parts[k].insert(parts[k].end(), items.begin() + static_cast<std::ptrdiff_t>(pos),
                      items.begin() + static_cast<std::ptrdiff_t>(pos + counts[k]));
      pos += counts[k];
    }
  }

  for (std::size_t k = 0; k < num_clients; ++k) {
    if (!parts[k].empty()) continue;
    std::vector<std::pair<std::size_t, std::size_t>> donors;  // (client, position)
    for (std::size_t j = 0; j < num_clients; ++j) {
      if (parts[j].size() < 2) continue;
      for (std::size_t pos = 0; pos < parts[j].size(); ++pos) donors.emplace_back(j, pos);
    }
    const auto [j, pos] = donors[std::uniform_int_distribution<std::size_t>(0, donors.size() - 1)(rng)];
    parts[k].push_back(parts[j][pos]);
    parts[j].erase(parts[j].begin() + static_cast<std::ptrdiff_t>(pos));
  }
  for (auto& p : parts) std::sort(p.begin(), p.end());
  return parts;
}

inline std::vector<ModalityType> assign_modalities(std::size_t num_clients, double rho, Rng& rng) {
  if (!(rho >= 0.0 && rho <= 1.0)) throw std::invalid_argument("assign_modalities: rho must be in [0, 1]");
  const auto single =
      static_cast<std::size_t>(std::llround(rho * static_cast<double>(num_clients)));
  std::size_t images = single / 2;
  if (single % 2 == 1 && std::bernoulli_distribution(0.5)(rng)) ++images;
  std::vector<std::size_t> order(num_clients);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<ModalityType> types(num_clients, ModalityType::paired);
  for (std::size_t i = 0; i < single; ++i) {
    types[order[i]] = i < images ? ModalityType::image_only : ModalityType::text_only;
  }
  return types;
}

struct HoldoutSplit {
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
};

/// Holds out round(fraction * n) of a client's items for local evaluation.
inline HoldoutSplit split_holdout(std::vector<std::size_t> items, double fraction, Rng& rng) {
  if (!(fraction >= 0.0 && fraction < 1.0)) throw std::invalid_argument("split_holdout: fraction must be in [0, 1)");
  std::shuffle(items.begin(), items.end(), rng);
  const auto n_test = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(items.size())));
  HoldoutSplit s;
  s.test.assign(items.begin(), items.begin() + static_cast<std::ptrdiff_t>(n_test));
  s.train.assign(items.begin() + static_cast<std::ptrdiff_t>(n_test), items.end());
  std::sort(s.train.begin(), s.train.end());
  std::sort(s.test.begin(), s.test.end());
  return s;
}

inline std::vector<std::size_t> class_histogram(const std::vector<std::size_t>& labels,
                                                const std::vector<std::size_t>& items,
                                                std::size_t num_classes) {
  std::vector<std::size_t> h(num_classes, 0);
  for (std::size_t i : items) ++h.at(labels.at(i));
  return h;
}

/// Shannon entropy (nats) of a count histogram; 0 for an empty one.
inline double label_entropy(const std::vector<std::size_t>& histogram) {
  const double total = std::accumulate(histogram.begin(), histogram.end(), 0.0);
  if (total == 0.0) return 0.0;
  double h = 0.0;
  for (std::size_t c : histogram) {
    if (c == 0) continue;
    const double p = static_cast<double>(c) / total;
    h -= p * std::log(p);
  }
  return h;
}

// --- retrieval ----------------------------------------------------------------

/// Percentage of queries whose ground-truth column ranks in the top k.
/// Ties with the ground truth are resolved in favour of the lower column index.
inline double recall_at_k(const Tensor& sim, const std::vector<std::size_t>& truth, std::size_t k) {
  if (truth.size() != sim.rows()) throw std::invalid_argument("recall_at_k: one ground truth per query");
  if (k == 0 || k > sim.cols()) throw std::invalid_argument("recall_at_k: k must be in [1, gallery size]");
  if (sim.rows() == 0) return 0.0;
  std::size_t hits = 0;
  for (std::size_t q = 0; q < sim.rows(); ++q) {
    const std::size_t gt = truth[q];
    if (gt >= sim.cols()) {
      throw std::out_of_range("recall_at_k: ground truth " + std::to_string(gt) + " out of range");
    }
    const double s = sim(q, gt);
    std::size_t rank = 0;
    for (std::size_t j = 0; j < sim.cols(); ++j) {
      const double v = sim(q, j);
      if (v > s || (v == s && j < gt)) ++rank;
    }
    if (rank < k) ++hits;
  }
  return 100.0 * static_cast<double>(hits) / static_cast<double>(sim.rows());
}

}  // namespace rcsr
