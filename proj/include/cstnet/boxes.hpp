// Copyright 2026 The cstnet Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>

namespace cstnet {

/// Axis-aligned box in pixel coordinates, top-left origin.
struct Box {
  double x = 0.0;
  double y = 0.0;
  double w = 0.0;
  double h = 0.0;

  double cx() const { return x + 0.5 * w; }
  double cy() const { return y + 0.5 * h; }
  double area() const { return w * h; }

  static Box from_center(double cx, double cy, double w, double h) {
    return {cx - 0.5 * w, cy - 0.5 * h, w, h};
  }
};

/// Intersection over union; requires positive extents on both boxes.
double iou(const Box& a, const Box& b);

/// Euclidean distance between box centers.
double center_distance(const Box& a, const Box& b);

/// Clips a box to the frame [0, fw) x [0, fh), keeping at least 1 px extent.
Box clip_to_frame(const Box& b, double fw, double fh);

}  // namespace cstnet
