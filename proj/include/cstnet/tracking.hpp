// Copyright 2026 The cstnet Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <utility>

#include "cstnet/model.hpp"
#include "cstnet/synth.hpp"

namespace cstnet {

/// Affine map between continuous patch coordinates [0, out_side] and frame
/// coordinates: frame = patch * scale + offset.
struct CropMapping {
  double scale = 1.0;
  double offset_x = 0.0;
  double offset_y = 0.0;

  double to_frame_x(double px) const { return px * scale + offset_x; }
  double to_frame_y(double py) const { return py * scale + offset_y; }
  double to_patch_x(double fx) const { return (fx - offset_x) / scale; }
  double to_patch_y(double fy) const { return (fy - offset_y) / scale; }

  Box box_to_frame(const Box& b) const {
    return {to_frame_x(b.x), to_frame_y(b.y), b.w * scale, b.h * scale};
  }
  Box box_to_patch(const Box& b) const {
    return {to_patch_x(b.x), to_patch_y(b.y), b.w / scale, b.h / scale};
  }
};

struct CropResult {
  Tensor<float> patch;  // [3 x out x out], same value domain as the frame
  CropMapping mapping;
};

/// Square crop of side area_factor * sqrt(w*h) centered on the box, padded
/// with the per-channel frame mean outside the frame, bilinearly resized.
inline CropResult crop_resize(const Tensor<float>& frame, const Box& box, double area_factor,
                              Index out_side) {
  if (box.w <= 0.0 || box.h <= 0.0)
    throw ContractError("crop_resize: box must have positive area");
  if (frame.rank() != 3) throw ShapeError("crop_resize: expected [C x H x W] frame");
  const Index ch = frame.extent(0), h = frame.extent(1), w = frame.extent(2);

  const double side = area_factor * std::sqrt(box.w * box.h);
  CropMapping map;
  map.scale = side / double(out_side);
  map.offset_x = box.cx() - side / 2.0;
  map.offset_y = box.cy() - side / 2.0;

  std::vector<float> mean(std::size_t(ch), 0.f);
  for (Index c = 0; c < ch; ++c) {
    double acc = 0.0;
    for (Index i = 0; i < h * w; ++i) acc += frame[c * h * w + i];
    mean[std::size_t(c)] = float(acc / double(h * w));
  }

  CropResult out{Tensor<float>({ch, out_side, out_side}), map};
  for (Index v = 0; v < out_side; ++v) {
    const double fy = map.to_frame_y(double(v) + 0.5) - 0.5;  // sample position in index space
    const Index y0 = Index(std::floor(fy));
    const double ty = fy - double(y0);
    for (Index u = 0; u < out_side; ++u) {
      const double fx = map.to_frame_x(double(u) + 0.5) - 0.5;
      const Index x0 = Index(std::floor(fx));
      const double tx = fx - double(x0);
      for (Index c = 0; c < ch; ++c) {
        auto at = [&](Index yy, Index xx) -> double {
          if (yy < 0 || yy >= h || xx < 0 || xx >= w) return mean[std::size_t(c)];
          return frame[(c * h + yy) * w + xx];
        };
        const double val = (1 - ty) * ((1 - tx) * at(y0, x0) + tx * at(y0, x0 + 1)) +
                           ty * ((1 - tx) * at(y0 + 1, x0) + tx * at(y0 + 1, x0 + 1));
        out.patch[(c * out_side + v) * out_side + u] = float(val);
      }
    }
  }
  return out;
}

/// Maps [0,1] image values to the network input domain.
inline Tensor<float> normalize_patch(const Tensor<float>& patch) {
  Tensor<float> out(patch.shape());
  for (Index i = 0; i < patch.numel(); ++i) out[i] = (patch[i] - 0.5f) / 0.5f;
  return out;
}

/// Tracker state: the current frame-coordinate box plus the cached,
/// positionally embedded template tokens of both modalities. The template is
/// fixed after initialization.
struct TrackerState {
  Box box;
  Tensor<float> z_rgb, z_tir;  // [N_z x C]
  int frame_index = 0;
  bool initialized = false;
};

inline TrackerState track_init(const Model<float>& model, const FramePair& pair,
                               const Box& gt) {
  const ModelConfig& cfg = model.cfg;
  CropResult rgb = crop_resize(pair.rgb, gt, cfg.template_area_factor, cfg.template_side);
  CropResult tir = crop_resize(pair.tir, gt, cfg.template_area_factor, cfg.template_side);
  Tape<float> t;
  TrackerState st;
  st.z_rgb = model.embed(t, normalize_patch(rgb.patch), Region::Template, Stream::Rgb)
                 .v.value();
  st.z_tir = model.embed(t, normalize_patch(tir.patch), Region::Template, Stream::Tir)
                 .v.value();
  st.box = gt;
  st.initialized = true;
  return st;
}

/// Decodes head maps produced for a crop back into clipped frame coordinates.
inline std::pair<Box, double> decode_to_frame(const Tensor<float>& score,
                                              const Tensor<float>& offset,
                                              const Tensor<float>& size,
                                              const CropMapping& mapping, double search_side,
                                              double frame_w, double frame_h) {
  auto [patch_box, conf] = decode_box(score, offset, size, search_side);
  return {clip_to_frame(mapping.box_to_frame(patch_box), frame_w, frame_h), conf};
}

inline std::pair<Box, double> track_update(const Model<float>& model, TrackerState& st,
                                           const FramePair& pair) {
  if (!st.initialized) throw ContractError("track_update: tracker not initialized");
  const ModelConfig& cfg = model.cfg;
  CropResult rgb = crop_resize(pair.rgb, st.box, cfg.search_area_factor, cfg.search_side);
  CropResult tir = crop_resize(pair.tir, st.box, cfg.search_area_factor, cfg.search_side);

  Tape<float> t;
  Tokens<float> z_r{t.leaf(st.z_rgb), cfg.template_grid(), Region::Template, Stream::Rgb};
  Tokens<float> z_t{t.leaf(st.z_tir), cfg.template_grid(), Region::Template, Stream::Tir};
  HeadOut<float> out = model.forward_search(t, z_r, z_t, normalize_patch(rgb.patch),
                                            normalize_patch(tir.patch), false);

  auto [box, conf] =
      decode_to_frame(out.score.value(), out.offset.value(), out.size.value(), rgb.mapping,
                      double(cfg.search_side), double(pair.width()), double(pair.height()));
  st.box = box;
  st.frame_index += 1;
  return {box, conf};
}

}  // namespace cstnet
