// Copyright 2026 The cstnet Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <map>
#include <string>
#include <vector>

#include "cstnet/gradcheck.hpp"
#include "cstnet/train.hpp"

namespace cstnet {

/// Full-model gradient verification in the 64-bit shadow mode.
///
/// Builds a double-precision model, forms a fixed synthetic batch, runs one
/// analytic backward pass of the training objective, then compares sampled
/// parameter coordinates against central differences. Sampling is stratified
/// so that every fusion sub-module and the head are covered. Batch norms run
/// in eval mode and the IoU term's enclosing-box diagonal is pinned at its
/// baseline value, keeping the objective a fixed differentiable function.
struct ModelGradCheckResult {
  GradCheckReport<double> report;
  std::map<std::string, int> bucket_counts;
  int coords_checked = 0;
  int kink_skips = 0;  // coordinates replaced because the probe interval
                       // straddled an activation boundary
};

/// Coordinates with analytic gradients below this magnitude are not sampled:
/// with an objective of order 10, the roundoff floor of double-precision
/// central differences (~1e-9 absolute) makes weaker coordinates impossible
/// to resolve to 1e-4 relative error regardless of step size.
inline constexpr double kGradCheckFloor = 1e-4;

inline const std::vector<std::pair<std::string, std::string>>& gradcheck_buckets() {
  static const std::vector<std::pair<std::string, std::string>> buckets = {
      {"se", ".se."},   {"lsa", ".lsa."}, {"gim", "_gim."},    {"lpu", ".lpu."},
      {"cam", ".cam."}, {"cfn", ".cfn."}, {"head", "head."},   {"backbone", ""},
  };
  return buckets;
}

inline ModelGradCheckResult model_gradient_check(const ModelConfig& cfg, int samples,
                                                 double step, std::uint64_t seed) {
  Model<double> model(cfg, seed);

  SceneSpec scene;
  scene.width = Index(cfg.search_side * 3 / 2);
  scene.height = scene.width;
  scene.frames = 2;
  scene.box0 = {double(scene.width) / 3.0, double(scene.height) / 3.0,
                double(cfg.search_side) / 4.0, double(cfg.search_side) / 5.0};
  scene.vx = 2.0;
  scene.vy = 1.0;
  auto frames = synth_sequence(scene, seed + 1);
  auto items = make_training_items<double>(cfg, frames);

  TrainConfig tcfg;
  std::vector<double> frozen_diag2;

  auto run = [&](bool with_backward) {
    Tape<double> tape;
    TotalLoss<double> loss =
        batch_loss(model, tape, items, tcfg, /*training=*/false,
                   frozen_diag2.empty() ? nullptr : &frozen_diag2);
    if (with_backward) {
      model.reg.zero_grads();
      tape.backward(loss.total);
    }
    return loss.parts.total;
  };

  // Baseline pass pins the IoU diagonals and fills the analytic gradients.
  {
    Tape<double> tape;
    TotalLoss<double> probe = batch_loss(model, tape, items, tcfg, false);
    frozen_diag2.assign(items.size(), 0.0);
    for (std::size_t i = 0; i < items.size(); ++i) {
      Tape<double> t2;
      std::vector<TrainItem<double>> one = {items[i]};
      frozen_diag2[i] = batch_loss(model, t2, one, tcfg, false).diag2;
    }
    (void)probe;
  }
  run(true);

  // Stratified coordinate sampling: parameters are bucketed by sub-module,
  // each bucket receiving an equal share of the budget.
  auto params = model.reg.trainable();
  const auto& buckets = gradcheck_buckets();
  std::map<std::string, std::vector<Parameter<double>*>> by_bucket;
  for (Parameter<double>* p : params) {
    for (const auto& [bucket, needle] : buckets) {
      if (needle.empty() || p->name.find(needle) != std::string::npos) {
        by_bucket[bucket].push_back(p);
        break;
      }
    }
  }

  const std::function<double()> objective_fn = [&] { return run(false); };

  // Reads the analytic derivative of one coordinate with the parameter
  // shifted by delta, restoring values and gradients afterwards.
  auto analytic_at = [&](const CoordRef<double>& c, double delta) {
    const double saved = c.param->value[c.index];
    c.param->value[c.index] = saved + delta;
    run(true);
    const double g = c.param->grad[c.index];
    c.param->value[c.index] = saved;
    run(true);  // restore baseline gradients
    return g;
  };

  // True when the probe interval [x-h, x+h] contains an activation boundary.
  // Two signals: the central difference is inconsistent under step halving
  // (smooth truncation is O(h^2), a boundary inside (h/2, h] is first order),
  // or the analytic derivative jumps across the interval (a flip inside
  // +-h/2 changes it discontinuously).
  auto straddles_kink = [&](const CoordRef<double>& c, double cd_h) {
    double& slot = c.param->value[c.index];
    const double saved = slot;
    slot = saved + step / 2;
    const double fp = objective_fn();
    slot = saved - step / 2;
    const double fm = objective_fn();
    slot = saved;
    const double cd_h2 = (fp - fm) / step;
    const double denom = std::max({std::abs(cd_h), std::abs(cd_h2), kGradCheckFloor});
    if (std::abs(cd_h - cd_h2) > 1e-4 * denom) return true;

    const double gp = analytic_at(c, step);
    const double gm = analytic_at(c, -step);
    return std::abs(gp - gm) > 0.01 * std::max({std::abs(gp), std::abs(gm), kGradCheckFloor});
  };

  Rng rng(seed + 2);
  ModelGradCheckResult res;
  GradCheckReport<double> worst;

  std::map<std::string, std::vector<CoordRef<double>>> eligible;
  for (auto& [bucket, plist] : by_bucket) {
    for (Parameter<double>* p : plist) {
      if (!p->has_grad()) continue;
      for (Index i = 0; i < p->grad.numel(); ++i)
        if (std::abs(p->grad[i]) >= kGradCheckFloor) eligible[bucket].push_back({p, i});
    }
  }

  auto check_one = [&](std::vector<CoordRef<double>>& pool, const std::string& bucket) {
    const Index pick = rng.uniform_int(Index(pool.size()));
    const CoordRef<double> coord = pool[std::size_t(pick)];
    pool[std::size_t(pick)] = pool.back();
    pool.pop_back();
    GradCheckReport<double> rep = finite_diff_check<double>(objective_fn, {coord}, step);
    if (rep.max_rel_err >= 5e-5 && straddles_kink(coord, rep.worst_central)) {
      ++res.kink_skips;
      return false;  // locally non-differentiable along this axis
    }
    if (rep.max_rel_err >= worst.max_rel_err) worst = rep;
    ++res.coords_checked;
    ++res.bucket_counts[bucket];
    return true;
  };

  // First pass gives each bucket an equal share; a second pass spends any
  // leftover budget round-robin over buckets that still have coordinates.
  const int share = samples / int(eligible.size());
  for (auto& [bucket, pool] : eligible) {
    int accepted = 0;
    while (accepted < share && !pool.empty()) accepted += check_one(pool, bucket) ? 1 : 0;
  }
  bool progressed = true;
  while (res.coords_checked < samples && progressed) {
    progressed = false;
    for (auto& [bucket, pool] : eligible) {
      if (res.coords_checked >= samples) break;
      if (pool.empty()) continue;
      check_one(pool, bucket);
      progressed = true;
    }
  }

  res.report = worst;
  return res;
}

}  // namespace cstnet
