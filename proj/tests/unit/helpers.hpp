#pragma once

#include <random>

#include "freqcoda/tensor.hpp"

namespace testutil {

template <class T = float>
freqcoda::BasicTensor<T> random_tensor(freqcoda::Dims dims, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  freqcoda::BasicTensor<T> t(std::move(dims));
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  for (auto& v : t.values()) v = static_cast<T>(u(rng));
  return t;
}

template <class T>
double max_abs_diff(const freqcoda::BasicTensor<T>& a, const freqcoda::BasicTensor<T>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(static_cast<double>(a[i]) - b[i]));
  return m;
}

inline double rel_err(double a, double b) { return std::abs(a - b) / std::max({1e-12, std::abs(a), std::abs(b)}); }

}  // namespace testutil
