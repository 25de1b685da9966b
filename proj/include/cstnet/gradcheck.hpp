// Copyright 2026 The cstnet Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>
#include <string>
#include <vector>

#include "cstnet/rng.hpp"
#include "cstnet/tape.hpp"

namespace cstnet {

/// One scalar coordinate of a parameter tensor.
template <typename S>
struct CoordRef {
  Parameter<S>* param = nullptr;
  Index index = 0;
};

template <typename S>
struct GradCheckReport {
  double max_rel_err = 0.0;
  std::string worst_coord;
  double worst_analytic = 0.0;
  double worst_central = 0.0;
};

/// Central-difference verification of analytic gradients.
///
/// `f` evaluates the scalar objective at the parameters' current values and
/// must be deterministic; the caller has already run an analytic backward
/// pass so that each parameter's grad slot holds dLoss/dParam. For every
/// sampled coordinate the relative error is
///   |analytic - central| / max(|analytic|, |central|, 1e-8).
template <typename S>
GradCheckReport<S> finite_diff_check(const std::function<double()>& f,
                                     const std::vector<CoordRef<S>>& coords, double step) {
  if (step <= 0.0) throw ContractError("finite_diff_check: step must be > 0");
  const double base1 = f();
  const double base2 = f();
  if (base1 != base2)
    throw DeterminismError("finite_diff_check: two baseline evaluations disagree (" +
                           std::to_string(base1) + " vs " + std::to_string(base2) + ")");
  GradCheckReport<S> rep;
  for (const CoordRef<S>& c : coords) {
    S& slot = c.param->value[c.index];
    const S saved = slot;
    slot = saved + static_cast<S>(step);
    const double fp = f();
    slot = saved - static_cast<S>(step);
    const double fm = f();
    slot = saved;
    const double central = (fp - fm) / (2.0 * step);
    const double analytic =
        c.param->has_grad() ? static_cast<double>(c.param->grad[c.index]) : 0.0;
    const double denom = std::max({std::abs(analytic), std::abs(central), 1e-8});
    const double rel = std::abs(analytic - central) / denom;
    if (rel >= rep.max_rel_err) {
      rep.max_rel_err = rel;
      rep.worst_coord = c.param->name + "[" + std::to_string(c.index) + "]";
      rep.worst_analytic = analytic;
      rep.worst_central = central;
    }
  }
  return rep;
}

/// Draws `count` coordinates uniformly from the given parameters,
/// proportionally to tensor size.
template <typename S>
std::vector<CoordRef<S>> sample_coords(const std::vector<Parameter<S>*>& params, int count,
                                       Rng& rng) {
  Index total = 0;
  for (auto* p : params) total += p->value.numel();
  std::vector<CoordRef<S>> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    Index flat = rng.uniform_int(total);
    for (auto* p : params) {
      if (flat < p->value.numel()) {
        out.push_back({p, flat});
        break;
      }
      flat -= p->value.numel();
    }
  }
  return out;
}

}  // namespace cstnet
