// Copyright 2026 The cstnet Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cstnet/boxes.hpp"
#include "cstnet/tensor.hpp"

namespace cstnet {

/// Spatially registered RGB + thermal frame. Both images are [3 x H x W]
/// with values in [0, 1]; the thermal channel is replicated to 3 planes.
struct FramePair {
  Tensor<float> rgb;
  Tensor<float> tir;

  Index height() const { return rgb.extent(1); }
  Index width() const { return rgb.extent(2); }
};

struct SynthFrame {
  FramePair pair;
  Box gt;
};

/// Per-frame degradations, loosely mirroring common RGB-T challenges.
enum class Effect {
  RgbBlackout,       // RGB contrast removed; thermal blob remains
  TirCrossover,      // thermal target/background equalized; RGB remains
  OcclusionStrip,    // opaque strip over the target in both modalities
  IlluminationRamp,  // RGB brightness ramps down over the effect range
};

struct EffectSpan {
  Effect effect;
  int first_frame = 0;
  int last_frame = 0;  // inclusive
};

/// Deterministic scene description: a textured target over a textured RGB
/// background and a flat thermal background with a constant-offset blob.
struct SceneSpec {
  Index width = 128;
  Index height = 128;
  int frames = 8;
  Box box0{48, 48, 32, 32};
  double vx = 2.0;  // per-frame translation, px
  double vy = 1.0;
  double size_growth = 0.0;     // per-frame w/h delta, px
  double tir_background = 0.3;  // flat thermal level
  double tir_contrast = 0.4;    // in-box minus out-of-box thermal mean
  std::vector<EffectSpan> effects;
};

/// Generates the sequence. Throws ContractError if the trajectory leaves the
/// frame. Same (spec, seed) yields bit-identical frames.
std::vector<SynthFrame> synth_sequence(const SceneSpec& spec, std::uint64_t seed);

/// Binary container: magic "CSTSEQ01" | u32 frames | u32 H | u32 W, then per
/// frame: RGB plane (3*H*W f32 LE), TIR plane (H*W f32 LE, replicated to 3
/// channels on load), gt box (4 f32: x, y, w, h).
void write_sequence_file(const std::string& path, const std::vector<SynthFrame>& frames);
std::vector<SynthFrame> read_sequence_file(const std::string& path);

/// Sidecar: one "x,y,w,h" line per frame.
void write_gt_sidecar(const std::string& path, const std::vector<SynthFrame>& frames);

}  // namespace cstnet
