// Copyright 2026 The cstnet Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "cstnet/head.hpp"
#include "cstnet/heatmap.hpp"
#include "cstnet/ops.hpp"

namespace cstnet {

inline constexpr double kLambdaIou = 2.0;
inline constexpr double kLambdaL1 = 5.0;

/// Scalar components of one training loss evaluation.
struct LossBreakdown {
  double total = 0.0;
  double cls = 0.0;
  double iou = 0.0;
  double l1 = 0.0;
};

/// Center-point focal loss with gaussian-softened negatives:
///   -(1/Npos) * sum[ y==1: (1-p)^2 log p ; else: (1-y)^4 p^2 log(1-p) ].
/// Predictions are clamped to [1e-6, 1-1e-6].
template <typename S>
Var<S> focal_loss(Var<S> pred_score, const Tensor<S>& gt_heat) {
  auto& t = *pred_score.tape;
  if (pred_score.value().shape() != gt_heat.shape())
    throw ShapeError("focal_loss: prediction " + shape_str(pred_score.value().shape()) +
                     " vs target " + shape_str(gt_heat.shape()));
  Index npos = 0;
  Tensor<S> pos_mask(gt_heat.shape()), neg_weight(gt_heat.shape());
  for (Index i = 0; i < gt_heat.numel(); ++i) {
    if (gt_heat[i] == S(1)) {
      pos_mask[i] = S(1);
      ++npos;
    } else {
      const S one_minus_y = S(1) - gt_heat[i];
      const S sq = one_minus_y * one_minus_y;
      neg_weight[i] = sq * sq;  // (1-y)^4
    }
  }
  if (npos == 0) throw ContractError("focal_loss: target has no positive cell");

  Var<S> p = ops::clamp(pred_score, S(1e-6), S(1) - S(1e-6));
  Var<S> one_minus_p = ops::affine(p, S(-1), S(1));
  Var<S> pos_term = ops::mul(t.constant(pos_mask),
                             ops::mul(ops::mul(one_minus_p, one_minus_p), ops::log_op(p)));
  Var<S> neg_term =
      ops::mul(t.constant(neg_weight), ops::mul(ops::mul(p, p), ops::log_op(one_minus_p)));
  Var<S> acc = ops::add(ops::sum(pos_term), ops::sum(neg_term));
  return ops::affine(acc, S(-1) / S(npos), S(0));
}

/// A box on the tape in center-size parameterization (scalar nodes).
template <typename S>
struct BoxVar {
  Var<S> cx, cy, w, h;
};

/// Distance-weighted IoU loss: exp(center_dist^2 / D) * (1 - IoU), where D is
/// the squared diagonal of the smallest enclosing box, held constant under
/// differentiation. Because D is a stop-gradient quantity, finite-difference
/// verification must evaluate the loss with D pinned to its baseline value;
/// `frozen_diag2` provides that pin.
template <typename S>
struct WiouResult {
  Var<S> loss;
  double diag2 = 0.0;  // the D actually used
};

template <typename S>
WiouResult<S> wiou_loss_traced(const BoxVar<S>& pred, const BoxVar<S>& gt,
                               std::optional<double> frozen_diag2 = {}) {
  auto& t = *pred.cx.tape;
  auto half = [&](Var<S> v) { return ops::affine(v, S(0.5), S(0)); };

  Var<S> px0 = ops::sub(pred.cx, half(pred.w)), px1 = ops::add(pred.cx, half(pred.w));
  Var<S> py0 = ops::sub(pred.cy, half(pred.h)), py1 = ops::add(pred.cy, half(pred.h));
  Var<S> gx0 = ops::sub(gt.cx, half(gt.w)), gx1 = ops::add(gt.cx, half(gt.w));
  Var<S> gy0 = ops::sub(gt.cy, half(gt.h)), gy1 = ops::add(gt.cy, half(gt.h));

  Var<S> iw = ops::relu(ops::sub(ops::min_elem(px1, gx1), ops::max_elem(px0, gx0)));
  Var<S> ih = ops::relu(ops::sub(ops::min_elem(py1, gy1), ops::max_elem(py0, gy0)));
  Var<S> inter = ops::mul(iw, ih);
  Var<S> uni = ops::sub(ops::add(ops::mul(pred.w, pred.h), ops::mul(gt.w, gt.h)), inter);
  Var<S> iou = ops::div(inter, uni);

  Var<S> dx = ops::sub(pred.cx, gt.cx), dy = ops::sub(pred.cy, gt.cy);
  Var<S> dist2 = ops::add(ops::mul(dx, dx), ops::mul(dy, dy));

  Var<S> diag2;
  if (frozen_diag2) {
    diag2 = t.constant(Tensor<S>::scalar(S(*frozen_diag2)));
  } else {
    Var<S> ew = ops::sub(ops::max_elem(px1, gx1), ops::min_elem(px0, gx0));
    Var<S> eh = ops::sub(ops::max_elem(py1, gy1), ops::min_elem(py0, gy0));
    diag2 = ops::detach(ops::add(ops::mul(ew, ew), ops::mul(eh, eh)));
  }
  if (double(diag2.value()[0]) <= 0.0)
    throw ContractError("wiou_loss: degenerate enclosing box");

  Var<S> r = ops::exp_op(ops::div(dist2, diag2));
  return WiouResult<S>{ops::mul(r, ops::affine(iou, S(-1), S(1))),
                       double(diag2.value()[0])};
}

template <typename S>
Var<S> wiou_loss(const BoxVar<S>& pred, const BoxVar<S>& gt,
                 std::optional<double> frozen_diag2 = {}) {
  return wiou_loss_traced(pred, gt, frozen_diag2).loss;
}

/// Convenience wrapper evaluating the loss for two concrete boxes.
template <typename S = double>
double wiou_value(const Box& pred, const Box& gt) {
  if (pred.w <= 0 || pred.h <= 0 || gt.w <= 0 || gt.h <= 0)
    throw ContractError("wiou_loss: boxes must have positive extents");
  Tape<S> t;
  auto boxvar = [&](const Box& b) {
    return BoxVar<S>{t.leaf(Tensor<S>::scalar(S(b.cx()))), t.leaf(Tensor<S>::scalar(S(b.cy()))),
                     t.leaf(Tensor<S>::scalar(S(b.w))), t.leaf(Tensor<S>::scalar(S(b.h)))};
  };
  return double(wiou_loss(boxvar(pred), boxvar(gt)).value()[0]);
}

template <typename S>
struct TotalLoss {
  Var<S> total;
  LossBreakdown parts;
  double diag2 = 0.0;  // enclosing-box diagonal the IoU term used
};

/// Weighted objective cls + lambda_iou * iou + lambda_l1 * l1, with the box
/// terms read out at the target's center cell.
template <typename S>
TotalLoss<S> total_loss(const HeadOut<S>& out, const EncodedTarget<S>& enc,
                        double lambda_iou = kLambdaIou, double lambda_l1 = kLambdaL1,
                        std::optional<double> frozen_diag2 = {}) {
  auto& t = *out.score.tape;
  const Index grid = out.score.value().extent(1);
  const Index cells = grid * grid;
  const Index flat = enc.cell_row * grid + enc.cell_col;

  Var<S> cls = focal_loss(out.score, enc.heatmap);

  Var<S> ox = ops::select(out.offset, flat);
  Var<S> oy = ops::select(out.offset, cells + flat);
  Var<S> sw = ops::select(out.size, flat);
  Var<S> sh = ops::select(out.size, cells + flat);

  // center-size prediction normalized to [0, 1] by the search side
  Var<S> pcx = ops::affine(ox, S(1) / S(grid), S(enc.cell_col) / S(grid));
  Var<S> pcy = ops::affine(oy, S(1) / S(grid), S(enc.cell_row) / S(grid));
  BoxVar<S> pred{pcx, pcy, sw, sh};

  const S gcx = S((double(enc.cell_col) + enc.off_x) / double(grid));
  const S gcy = S((double(enc.cell_row) + enc.off_y) / double(grid));
  BoxVar<S> gt{t.constant(Tensor<S>::scalar(gcx)), t.constant(Tensor<S>::scalar(gcy)),
               t.constant(Tensor<S>::scalar(S(enc.w_norm))),
               t.constant(Tensor<S>::scalar(S(enc.h_norm)))};

  Var<S> l1 = ops::affine(
      ops::add(ops::add(ops::abs_op(ops::sub(pcx, gt.cx)), ops::abs_op(ops::sub(pcy, gt.cy))),
               ops::add(ops::abs_op(ops::sub(sw, gt.w)), ops::abs_op(ops::sub(sh, gt.h)))),
      S(0.25), S(0));

  WiouResult<S> iou = wiou_loss_traced(pred, gt, frozen_diag2);

  Var<S> total =
      ops::add(cls, ops::add(ops::affine(iou.loss, S(lambda_iou), S(0)),
                             ops::affine(l1, S(lambda_l1), S(0))));

  TotalLoss<S> r;
  r.total = total;
  r.parts.cls = double(cls.value()[0]);
  r.parts.iou = double(iou.loss.value()[0]);
  r.parts.l1 = double(l1.value()[0]);
  r.parts.total = double(total.value()[0]);
  r.diag2 = iou.diag2;
  return r;
}

}  // namespace cstnet
