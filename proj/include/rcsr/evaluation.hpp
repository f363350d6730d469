#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <numeric>
#include <optional>
#include <vector>

#include "rcsr/client.hpp"
#include "rcsr/data.hpp"
#include "rcsr/model.hpp"
#include "rcsr/personalize.hpp"

namespace rcsr {

inline constexpr std::array<std::size_t, 3> kRecallKs{1, 5, 10};
inline constexpr std::size_t kMinSlicePairs = 5;

struct DirectionalRecall {
  std::array<double, 3> i2t{};  // R@1, R@5, R@10
  std::array<double, 3> t2i{};
  std::array<double, 3> mean{};
};

struct RetrievalMetrics {
  DirectionalRecall global;
  std::map<std::size_t, double> per_client_r1;   // mean of both directions on the client's slice
  std::vector<std::size_t> excluded_clients;     // slices too small to score
  double fair_std = 0.0;
  double worst_r1 = 0.0;
  double best_r1 = 0.0;
  double gap = 0.0;   // best minus worst client R@1
};

struct PersonalView {
  const PersonalAdapter* adapter = nullptr;
  double strength = 0.0;
};

inline Tensor similarity(const Tensor& queries, const Tensor& gallery) {
  return ad::detail::matmul_nt(queries, gallery);
}

inline std::vector<std::size_t> identity_truth(std::size_t n) {
  std::vector<std::size_t> t(n);
  std::iota(t.begin(), t.end(), 0);
  return t;
}

/// Bidirectional Recall@{1,5,10} for row-aligned embedding pairs. Ks larger
/// than the gallery are reported as 100.
inline DirectionalRecall bidirectional_recall(const Tensor& zi, const Tensor& zt) {
  DirectionalRecall r;
  const Tensor s = similarity(zi, zt);
  const Tensor st = similarity(zt, zi);
  const auto truth = identity_truth(zi.rows());
  for (std::size_t j = 0; j < kRecallKs.size(); ++j) {
    const std::size_t k = kRecallKs[j];
    r.i2t[j] = k <= s.cols() ? recall_at_k(s, truth, k) : 100.0;
    r.t2i[j] = k <= st.cols() ? recall_at_k(st, truth, k) : 100.0;
    r.mean[j] = (r.i2t[j] + r.t2i[j]) / 2.0;
  }
  return r;
}

inline void summarize_fairness(RetrievalMetrics& m) {
  if (m.per_client_r1.empty()) return;
  std::vector<double> v;
  for (const auto& [id, r1] : m.per_client_r1) v.push_back(r1);
  const double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  double sq = 0.0;
  for (double x : v) sq += (x - mean) * (x - mean);
  m.fair_std = std::sqrt(sq / static_cast<double>(v.size()));
  m.worst_r1 = *std::min_element(v.begin(), v.end());
  m.best_r1 = *std::max_element(v.begin(), v.end());
  m.gap = m.best_r1 - m.worst_r1;
}

/// Global metrics on the shared test set and per-client R@1 on each client's
/// holdout slice, optionally through that client's personal adapter.
inline RetrievalMetrics evaluate(const TrainableParams& theta, const FrozenBackbone& backbone,
                                 const SyntheticDataset& test, const std::vector<ClientState>& clients,
                                 const std::map<std::size_t, PersonalView>& personal = {}) {
  RetrievalMetrics m;
  m.global = bidirectional_recall(encode(theta, backbone, test.image, Modality::image),
                                  encode(theta, backbone, test.text, Modality::text));
  for (const ClientState& c : clients) {
    if (c.test.size() < kMinSlicePairs) {
      m.excluded_clients.push_back(c.id);
      continue;
    }
    Tensor zi = encode(theta, backbone, c.test.image, Modality::image);
    Tensor zt = encode(theta, backbone, c.test.text, Modality::text);
    if (auto it = personal.find(c.id); it != personal.end() && it->second.adapter != nullptr) {
      zi = personalize_embedding(*it->second.adapter, Modality::image, zi, it->second.strength);
      zt = personalize_embedding(*it->second.adapter, Modality::text, zt, it->second.strength);
    }
    const Tensor s = similarity(zi, zt);
    const Tensor st = similarity(zt, zi);
    const auto truth = identity_truth(zi.rows());
    m.per_client_r1[c.id] = (recall_at_k(s, truth, 1) + recall_at_k(st, truth, 1)) / 2.0;
  }
  summarize_fairness(m);
  return m;
}

}  // namespace rcsr
