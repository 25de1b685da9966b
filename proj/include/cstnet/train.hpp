// Copyright 2026 The cstnet Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "cstnet/losses.hpp"
#include "cstnet/model.hpp"
#include "cstnet/tracking.hpp"

namespace cstnet {

/// Desk-scale training hyperparameters. The fusion group keeps the 10x lower
/// rate of the full-scale recipe; the absolute values are tuned so the fixed
/// overfit demonstration converges in a couple hundred steps.
struct TrainConfig {
  double lr_backbone = 2e-3;
  double lr_fusion = 2e-4;  // keeps the 10x backbone/fusion gap
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int steps = 200;
  std::uint64_t seed = 7;
  double lambda_iou = kLambdaIou;
  double lambda_l1 = kLambdaL1;

  void validate() const {
    if (lr_backbone < 0.0 || lr_fusion < 0.0)
      throw ConfigError("train config: learning rates must not be negative");
    if (steps < 1) throw ConfigError("train config: steps must be >= 1");
  }
};

/// Decoupled-weight-decay adaptive-moment optimizer over two rate groups:
/// parameters under the fusion namespace and everything else.
template <typename S>
class AdamW {
 public:
  AdamW(std::vector<Parameter<S>*> params, const TrainConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    for (Parameter<S>* p : params) {
      if (!p->trainable) continue;
      Slot s;
      s.param = p;
      s.lr = p->name.rfind(kFusionPrefix, 0) == 0 ? cfg.lr_fusion : cfg.lr_backbone;
      s.m = Tensor<S>(p->value.shape());
      s.v = Tensor<S>(p->value.shape());
      slots_.push_back(std::move(s));
    }
  }

  /// One update from the gradients currently held by the parameters.
  void step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, double(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, double(t_));
    for (Slot& s : slots_) {
      if (!s.param->has_grad()) continue;
      Tensor<S>& g = s.param->grad;
      Tensor<S>& p = s.param->value;
      for (Index i = 0; i < p.numel(); ++i) {
        s.m[i] = S(cfg_.beta1) * s.m[i] + S(1.0 - cfg_.beta1) * g[i];
        s.v[i] = S(cfg_.beta2) * s.v[i] + S(1.0 - cfg_.beta2) * g[i] * g[i];
        const double mhat = double(s.m[i]) / bc1;
        const double vhat = double(s.v[i]) / bc2;
        p[i] -= S(s.lr * (mhat / (std::sqrt(vhat) + cfg_.eps) +
                          cfg_.weight_decay * double(p[i])));
      }
    }
  }

  std::int64_t step_count() const { return t_; }

 private:
  struct Slot {
    Parameter<S>* param;
    double lr;
    Tensor<S> m, v;
  };
  TrainConfig cfg_;
  std::vector<Slot> slots_;
  std::int64_t t_ = 0;
};

/// One training example: normalized template/search patches of both
/// modalities plus the encoded target in search-patch coordinates.
template <typename S>
struct TrainItem {
  Tensor<S> z_rgb, x_rgb, z_tir, x_tir;
  EncodedTarget<S> target;
  Box gt_in_search;
};

/// Builds fixed training items from synthetic frames: template and search
/// crops centered on the ground truth, exactly as the tracker would crop
/// when perfectly locked on.
template <typename S>
std::vector<TrainItem<S>> make_training_items(const ModelConfig& cfg,
                                              const std::vector<SynthFrame>& frames) {
  std::vector<TrainItem<S>> items;
  const Index grid = cfg.search_grid().rows;
  for (const SynthFrame& f : frames) {
    CropResult z_r = crop_resize(f.pair.rgb, f.gt, cfg.template_area_factor, cfg.template_side);
    CropResult z_t = crop_resize(f.pair.tir, f.gt, cfg.template_area_factor, cfg.template_side);
    CropResult x_r = crop_resize(f.pair.rgb, f.gt, cfg.search_area_factor, cfg.search_side);
    CropResult x_t = crop_resize(f.pair.tir, f.gt, cfg.search_area_factor, cfg.search_side);
    TrainItem<S> item;
    item.z_rgb = normalize_patch(z_r.patch).template cast<S>();
    item.z_tir = normalize_patch(z_t.patch).template cast<S>();
    item.x_rgb = normalize_patch(x_r.patch).template cast<S>();
    item.x_tir = normalize_patch(x_t.patch).template cast<S>();
    item.gt_in_search = x_r.mapping.box_to_patch(f.gt);
    item.target = encode_target<S>(item.gt_in_search, grid, double(cfg.search_side));
    items.push_back(std::move(item));
  }
  return items;
}

/// Forward + loss over a batch on one tape; the mean loss node is returned
/// together with the averaged breakdown.
template <typename S>
TotalLoss<S> batch_loss(const Model<S>& model, Tape<S>& tape,
                        const std::vector<TrainItem<S>>& items, const TrainConfig& cfg,
                        bool training,
                        const std::vector<double>* frozen_diag2 = nullptr) {
  if (items.empty()) throw ContractError("batch_loss: empty batch");
  TotalLoss<S> acc;
  Var<S> total;
  std::vector<double> diag2s;
  for (std::size_t i = 0; i < items.size(); ++i) {
    const TrainItem<S>& it = items[i];
    HeadOut<S> out =
        model.forward_pair(tape, it.z_rgb, it.x_rgb, it.z_tir, it.x_tir, training);
    std::optional<double> fd;
    if (frozen_diag2) fd = (*frozen_diag2)[i];
    TotalLoss<S> l = total_loss(out, it.target, cfg.lambda_iou, cfg.lambda_l1, fd);
    total = i == 0 ? l.total : ops::add(total, l.total);
    acc.parts.cls += l.parts.cls;
    acc.parts.iou += l.parts.iou;
    acc.parts.l1 += l.parts.l1;
    diag2s.push_back(l.diag2);
  }
  const double n = double(items.size());
  acc.total = ops::affine(total, S(1.0 / n), S(0));
  acc.parts.cls /= n;
  acc.parts.iou /= n;
  acc.parts.l1 /= n;
  acc.parts.total = double(acc.total.value()[0]);
  acc.diag2 = diag2s.empty() ? 0.0 : diag2s[0];
  return acc;
}

/// Forward, loss, backward, optimizer update. Throws on a non-finite loss.
template <typename S>
LossBreakdown train_step(Model<S>& model, AdamW<S>& opt,
                         const std::vector<TrainItem<S>>& items, const TrainConfig& cfg,
                         int step_index) {
  Tape<S> tape;
  model.reg.zero_grads();
  TotalLoss<S> loss = batch_loss(model, tape, items, cfg, /*training=*/true);
  if (!std::isfinite(loss.parts.total))
    throw NumericError("training diverged: non-finite loss at step " +
                       std::to_string(step_index));
  tape.backward(loss.total);
  opt.step();
  return loss.parts;
}

/// L2 gradient norm per parameter group (the dotted name minus its final
/// component), plus the list of parameters whose gradient is identically
/// zero after one backward pass.
struct GradFlowReport {
  std::map<std::string, double> group_norms;
  std::vector<std::string> zero_grad_params;
};

template <typename S>
GradFlowReport grad_flow_report(Model<S>& model, const std::vector<TrainItem<S>>& items,
                                const TrainConfig& cfg = {}) {
  Tape<S> tape;
  model.reg.zero_grads();
  TotalLoss<S> loss = batch_loss(model, tape, items, cfg, /*training=*/true);
  tape.backward(loss.total);

  GradFlowReport rep;
  for (Parameter<S>* p : model.reg.trainable()) {
    double sq = 0.0;
    if (p->has_grad())
      for (Index i = 0; i < p->grad.numel(); ++i) sq += double(p->grad[i]) * double(p->grad[i]);
    const auto dot = p->name.rfind('.');
    const std::string group = dot == std::string::npos ? p->name : p->name.substr(0, dot);
    rep.group_norms[group] += sq;
    if (sq == 0.0) rep.zero_grad_params.push_back(p->name);
  }
  for (auto& [k, v] : rep.group_norms) v = std::sqrt(v);
  return rep;
}

struct OverfitResult {
  std::vector<LossBreakdown> log;  // one entry per step
  double initial_total = 0.0;
  double final_total = 0.0;
};

/// Fixed-batch overfit run; `on_step` (when set) observes each step's loss.
template <typename S>
OverfitResult run_overfit(Model<S>& model, const std::vector<TrainItem<S>>& items,
                          const TrainConfig& cfg,
                          const std::function<void(int, const LossBreakdown&)>& on_step = {}) {
  cfg.validate();
  AdamW<S> opt(model.reg.all(), cfg);
  OverfitResult res;
  for (int s = 0; s < cfg.steps; ++s) {
    LossBreakdown lb = train_step(model, opt, items, cfg, s);
    if (on_step) on_step(s, lb);
    res.log.push_back(lb);
  }
  res.initial_total = res.log.front().total;
  res.final_total = res.log.back().total;
  return res;
}

/// FNV-1a digest over all parameter bytes, for reproducibility checks.
template <typename S>
std::uint64_t parameter_checksum(Model<S>& model) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (Parameter<S>* p : model.reg.all()) {
    h = fnv1a64(p->name.data(), p->name.size(), h);
    for (Index i = 0; i < p->value.numel(); ++i) {
      const float v = float(p->value[i]);
      h = fnv1a64(&v, sizeof(v), h);
    }
  }
  return h;
}

}  // namespace cstnet
