#pragma once

#include <cmath>
#include <random>
#include <vector>

#include "rcsr/rng.hpp"
#include "rcsr/tensor.hpp"

namespace rcsr::test {

inline Tensor random_tensor(std::size_t rows, std::size_t cols, Rng& rng, double lo = -1.0,
                            double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Tensor t(rows, cols);
  for (double& v : t.values()) v = dist(rng);
  return t;
}

inline Tensor random_unit_rows(std::size_t rows, std::size_t cols, Rng& rng) {
  Tensor t = random_tensor(rows, cols, rng);
  for (std::size_t r = 0; r < rows; ++r) {
    const double n = l2_norm(t.row(r));
    for (double& v : t.row(r)) v /= n;
  }
  return t;
}

inline std::vector<double> random_unit(std::size_t dim, Rng& rng) {
  Tensor t = random_unit_rows(1, dim, rng);
  return {t.values().begin(), t.values().end()};
}

inline std::vector<double> basis(std::size_t dim, std::size_t i, double scale = 1.0) {
  std::vector<double> v(dim, 0.0);
  v[i] = scale;
  return v;
}

}  // namespace rcsr::test
