// Copyright 2026 The cstnet Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <random>

#include "cstnet/tensor.hpp"

namespace cstnet {

/// Seeded random source with fully specified output streams.
///
/// Distributions are derived from mt19937_64 uniforms by explicit formulas
/// (Box-Muller for normals) so that a given seed reproduces the same values
/// on every platform, which the checkpoint and training determinism tests
/// rely on.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  /// Uniform in [0, 1).
  double uniform() {
    return double(gen_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  std::int64_t uniform_int(std::int64_t n) {  // in [0, n)
    return static_cast<std::int64_t>(uniform() * double(n)) % n;
  }

  double normal() {
    // Box-Muller, one value per call; the pair's second half is discarded
    // to keep the stream consumption pattern trivial.
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  /// Normal(0, sigma) resampled until |v| <= 2*sigma.
  double trunc_normal(double sigma) {
    for (;;) {
      double v = normal() * sigma;
      if (std::abs(v) <= 2.0 * sigma) return v;
    }
  }

  template <typename S>
  void fill_uniform(Tensor<S>& t, double lo, double hi) {
    for (Index i = 0; i < t.numel(); ++i) t[i] = static_cast<S>(uniform(lo, hi));
  }

  template <typename S>
  void fill_trunc_normal(Tensor<S>& t, double sigma) {
    // Values are materialized in float first so that float and double
    // model instances built from the same seed hold identical parameters.
    for (Index i = 0; i < t.numel(); ++i)
      t[i] = static_cast<S>(static_cast<float>(trunc_normal(sigma)));
  }

 private:
  std::mt19937_64 gen_;
};

}  // namespace cstnet
