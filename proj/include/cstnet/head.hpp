// Copyright 2026 The cstnet Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <utility>
#include <vector>

#include "cstnet/boxes.hpp"
#include "cstnet/layers.hpp"
#include "cstnet/tokens.hpp"

namespace cstnet {

template <typename S>
struct HeadOut {
  Var<S> score;   // [1 x S x S], sigmoid
  Var<S> offset;  // [2 x S x S], clamped to [0, 1)
  Var<S> size;    // [2 x S x S], sigmoid, fractions of the search side
};

/// Elementwise sum of the final-block search features of the two modalities.
template <typename S>
Tokens<S> fuse_search_outputs(const Tokens<S>& xr_out, const Tokens<S>& xt_out) {
  check_aligned(xr_out, xt_out, "fuse_search_outputs");
  Tokens<S> mixed = xr_out.with(ops::add(xr_out.v, xt_out.v));
  mixed.stream = Stream::Mixed;
  return mixed;
}

/// Fully convolutional center head: three branches of stacked 3x3
/// Conv-BN-ReLU over the search grid, each closed by a 1x1 conv.
template <typename S>
struct CenterHead {
  struct Branch {
    std::vector<ConvBlock<S>> convs;
    ConvBlock<S> out;
  };
  Branch score, offset, size;

  static CenterHead create(ParamRegistry<S>& reg, Index c,
                           const std::vector<Index>& schedule, Rng& rng) {
    CenterHead h;
    auto make_branch = [&](const std::string& name, Index out_ch) {
      Branch b;
      Index in = c;
      int i = 1;
      for (Index ch : schedule) {
        b.convs.push_back(
            ConvBlock<S>::create(reg, "head." + name + ".conv" + std::to_string(i), in, ch, 3,
                                 1, true, rng));
        in = ch;
        ++i;
      }
      b.out = ConvBlock<S>::create(reg, "head." + name + ".out", in, out_ch, 1, 1, false, rng);
      return b;
    };
    h.score = make_branch("score", 1);
    h.offset = make_branch("offset", 2);
    h.size = make_branch("size", 2);
    return h;
  }

  static Var<S> run_branch(const Branch& b, Var<S> img, bool training) {
    for (const auto& conv : b.convs) img = ops::relu(conv(img, training));
    return b.out(img, training);
  }

  HeadOut<S> operator()(const Tokens<S>& mixed, bool training) const {
    Var<S> img = ops::tokens_to_image(mixed.v, mixed.grid.rows, mixed.grid.cols);
    HeadOut<S> out;
    out.score = ops::sigmoid(run_branch(score, img, training));
    out.offset = ops::clamp(run_branch(offset, img, training), S(0), S(1) - S(1e-6));
    out.size = ops::sigmoid(run_branch(size, img, training));
    return out;
  }
};

/// Decodes the peak cell into a box in search-patch pixels. Ties resolve to
/// the smallest row-major flat index. Returns the box and the peak score.
template <typename S>
std::pair<Box, double> decode_box(const Tensor<S>& score, const Tensor<S>& offset,
                                  const Tensor<S>& size, double search_side) {
  const Index grid = score.extent(1);
  Index best = 0;
  for (Index i = 1; i < grid * grid; ++i)
    if (score[i] > score[best]) best = i;
  const Index row = best / grid, col = best % grid;
  const Index cells = grid * grid;
  const double ox = double(offset[best]);
  const double oy = double(offset[cells + best]);
  const double cx = (double(col) + ox) / double(grid) * search_side;
  const double cy = (double(row) + oy) / double(grid) * search_side;
  const double w = double(size[best]) * search_side;
  const double h = double(size[cells + best]) * search_side;
  return {Box::from_center(cx, cy, w, h), double(score[best])};
}

}  // namespace cstnet
