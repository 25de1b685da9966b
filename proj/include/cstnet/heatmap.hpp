// Copyright 2026 The cstnet Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>

#include "cstnet/boxes.hpp"
#include "cstnet/tensor.hpp"

namespace cstnet {

/// Largest gaussian radius keeping corner-perturbed boxes above the overlap
/// threshold (the min-overlap rule of the cited center-point heads).
inline double gaussian_radius(double height, double width, double min_overlap = 0.7) {
  const double a1 = 1.0, b1 = height + width,
               c1 = width * height * (1.0 - min_overlap) / (1.0 + min_overlap);
  const double r1 = (b1 + std::sqrt(b1 * b1 - 4.0 * a1 * c1)) / 2.0;

  const double a2 = 4.0, b2 = 2.0 * (height + width), c2 = (1.0 - min_overlap) * width * height;
  const double r2 = (b2 + std::sqrt(b2 * b2 - 4.0 * a2 * c2)) / 2.0;

  const double a3 = 4.0 * min_overlap, b3 = -2.0 * min_overlap * (height + width),
               c3 = (min_overlap - 1.0) * width * height;
  const double r3 = (b3 + std::sqrt(b3 * b3 - 4.0 * a3 * c3)) / 2.0;

  return std::max(0.0, std::min({r1, r2, r3}));
}

/// Ground-truth maps for one target box in search-patch pixels.
template <typename S>
struct EncodedTarget {
  Tensor<S> heatmap;  // [1 x S x S], gaussian bump peaking at 1 on the center cell
  Index cell_row = 0, cell_col = 0;
  double off_x = 0.0, off_y = 0.0;    // sub-cell center offsets in cell units, in [0, 1)
  double w_norm = 0.0, h_norm = 0.0;  // extents as fractions of the search side
};

template <typename S>
EncodedTarget<S> encode_target(const Box& box_px, Index grid, double search_side) {
  if (box_px.w <= 0.0 || box_px.h <= 0.0)
    throw ContractError("encode_target: box extents must be positive");
  EncodedTarget<S> enc;
  enc.heatmap = Tensor<S>({1, grid, grid});

  const double cell_x = box_px.cx() / search_side * double(grid);
  const double cell_y = box_px.cy() / search_side * double(grid);
  enc.cell_col = std::min(grid - 1, std::max(Index(0), Index(cell_x)));
  enc.cell_row = std::min(grid - 1, std::max(Index(0), Index(cell_y)));
  enc.off_x = cell_x - double(enc.cell_col);
  enc.off_y = cell_y - double(enc.cell_row);
  enc.w_norm = box_px.w / search_side;
  enc.h_norm = box_px.h / search_side;

  const double gw = box_px.w / search_side * double(grid);
  const double gh = box_px.h / search_side * double(grid);
  const Index radius = Index(gaussian_radius(gh, gw));
  const double sigma = (2.0 * double(radius) + 1.0) / 6.0;
  for (Index r = 0; r < grid; ++r)
    for (Index c = 0; c < grid; ++c) {
      const double dr = double(r - enc.cell_row), dc = double(c - enc.cell_col);
      if (std::abs(dr) > double(radius) || std::abs(dc) > double(radius)) continue;
      const double v = std::exp(-(dr * dr + dc * dc) / (2.0 * sigma * sigma));
      enc.heatmap[r * grid + c] = std::max(enc.heatmap[r * grid + c], S(v));
    }
  enc.heatmap[enc.cell_row * grid + enc.cell_col] = S(1);
  return enc;
}

}  // namespace cstnet
