// Copyright 2026 The cstnet Authors
// SPDX-License-Identifier: Apache-2.0

#include "cstnet/boxes.hpp"

#include <cmath>

#include "cstnet/error.hpp"

namespace cstnet {

double iou(const Box& a, const Box& b) {
  if (a.w <= 0.0 || a.h <= 0.0 || b.w <= 0.0 || b.h <= 0.0)
    throw ContractError("iou: boxes must have positive extents");
  // Areas use the same corner-difference form as the intersection so that
  // identical boxes evaluate to exactly 1.
  const double ax1 = a.x + a.w, ay1 = a.y + a.h;
  const double bx1 = b.x + b.w, by1 = b.y + b.h;
  const double iw = std::max(0.0, std::min(ax1, bx1) - std::max(a.x, b.x));
  const double ih = std::max(0.0, std::min(ay1, by1) - std::max(a.y, b.y));
  const double inter = iw * ih;
  const double area_a = (ax1 - a.x) * (ay1 - a.y);
  const double area_b = (bx1 - b.x) * (by1 - b.y);
  const double uni = area_a + area_b - inter;
  return inter / uni;
}

double center_distance(const Box& a, const Box& b) {
  const double dx = a.cx() - b.cx();
  const double dy = a.cy() - b.cy();
  return std::sqrt(dx * dx + dy * dy);
}

Box clip_to_frame(const Box& b, double fw, double fh) {
  Box r = b;
  r.w = std::min(r.w, fw);
  r.h = std::min(r.h, fh);
  r.w = std::max(r.w, 1.0);
  r.h = std::max(r.h, 1.0);
  r.x = std::min(std::max(r.x, 0.0), fw - r.w);
  r.y = std::min(std::max(r.y, 0.0), fh - r.h);
  return r;
}

}  // namespace cstnet
