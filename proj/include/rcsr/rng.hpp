#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

#include "rcsr/tensor.hpp"

namespace rcsr {

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

/// Order-sensitive seed mixing, e.g. derive_seed(master, {round, client_id}).
inline std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> parts) {
  std::uint64_t h = splitmix64(base);
  for (std::uint64_t p : parts) h = splitmix64(h ^ splitmix64(p + 0x632BE59BD9B4E019ULL));
  return h;
}

// Stream tags keep independent random consumers from sharing sequences.
namespace stream {
inline constexpr std::uint64_t kBackbone = 1;
inline constexpr std::uint64_t kParams = 2;
inline constexpr std::uint64_t kRouter = 3;
inline constexpr std::uint64_t kPartition = 4;
inline constexpr std::uint64_t kSampling = 5;
inline constexpr std::uint64_t kClient = 6;
inline constexpr std::uint64_t kProbe = 7;
inline constexpr std::uint64_t kPersonal = 8;
inline constexpr std::uint64_t kAdapterInit = 9;
inline constexpr std::uint64_t kData = 10;
}  // namespace stream

inline Tensor uniform_tensor(std::size_t rows, std::size_t cols, double scale, Rng& rng) {
  std::uniform_real_distribution<double> dist(-scale, scale);
  Tensor t(rows, cols);
  for (double& v : t.values()) v = dist(rng);
  return t;
}

inline Tensor normal_tensor(std::size_t rows, std::size_t cols, double stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Tensor t(rows, cols);
  for (double& v : t.values()) v = dist(rng);
  return t;
}

}  // namespace rcsr
