// Copyright 2026 The cstnet Authors
// SPDX-License-Identifier: Apache-2.0

#include "cstnet/synth.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include "cstnet/error.hpp"
#include "cstnet/rng.hpp"

namespace cstnet {

namespace {

constexpr char kSeqMagic[8] = {'C', 'S', 'T', 'S', 'E', 'Q', '0', '1'};

// Coarse value-noise texture bilinearly upsampled to the frame, in [lo, hi].
Tensor<float> value_noise(Index h, Index w, Index cell, double lo, double hi, Rng& rng) {
  const Index gh = h / cell + 2, gw = w / cell + 2;
  Tensor<float> grid({gh, gw});
  rng.fill_uniform(grid, lo, hi);
  Tensor<float> out({h, w});
  for (Index y = 0; y < h; ++y) {
    const double fy = double(y) / double(cell);
    const Index y0 = Index(fy);
    const double ty = fy - double(y0);
    for (Index x = 0; x < w; ++x) {
      const double fx = double(x) / double(cell);
      const Index x0 = Index(fx);
      const double tx = fx - double(x0);
      const double v = (1 - ty) * ((1 - tx) * grid.at2(y0, x0) + tx * grid.at2(y0, x0 + 1)) +
                       ty * ((1 - tx) * grid.at2(y0 + 1, x0) + tx * grid.at2(y0 + 1, x0 + 1));
      out.at2(y, x) = float(v);
    }
  }
  return out;
}

bool in_span(const EffectSpan& s, int f) { return f >= s.first_frame && f <= s.last_frame; }

}  // namespace

std::vector<SynthFrame> synth_sequence(const SceneSpec& spec, std::uint64_t seed) {
  if (spec.frames < 1) throw ContractError("synth_sequence: frame count must be >= 1");
  Rng rng(seed);

  // Static per-sequence textures. The target texture is anchored to
  // target-local coordinates so it travels with the box.
  std::vector<Tensor<float>> bg_rgb;
  for (int c = 0; c < 3; ++c)
    bg_rgb.push_back(value_noise(spec.height, spec.width, 8, 0.2, 0.8, rng));
  const Index tex_side = 64;
  std::vector<Tensor<float>> target_tex;
  for (int c = 0; c < 3; ++c) {
    Tensor<float> t({tex_side, tex_side});
    rng.fill_uniform(t, 0.55, 1.0);
    target_tex.push_back(std::move(t));
  }

  std::vector<SynthFrame> frames;
  frames.reserve(std::size_t(spec.frames));
  for (int f = 0; f < spec.frames; ++f) {
    Box gt{spec.box0.x + f * spec.vx, spec.box0.y + f * spec.vy,
           spec.box0.w + f * spec.size_growth, spec.box0.h + f * spec.size_growth};
    if (gt.x < 0 || gt.y < 0 || gt.w <= 0 || gt.h <= 0 || gt.x + gt.w > double(spec.width) ||
        gt.y + gt.h > double(spec.height))
      throw ContractError("synth_sequence: target leaves the frame at frame " +
                          std::to_string(f));

    bool rgb_blackout = false, tir_crossover = false, occlusion = false;
    double illum = 1.0;
    for (const EffectSpan& s : spec.effects) {
      if (!in_span(s, f)) continue;
      switch (s.effect) {
        case Effect::RgbBlackout: rgb_blackout = true; break;
        case Effect::TirCrossover: tir_crossover = true; break;
        case Effect::OcclusionStrip: occlusion = true; break;
        case Effect::IlluminationRamp: {
          const int len = s.last_frame - s.first_frame + 1;
          illum = 1.0 - 0.8 * double(f - s.first_frame + 1) / double(len);
          break;
        }
      }
    }

    FramePair pair{Tensor<float>({3, spec.height, spec.width}),
                   Tensor<float>({3, spec.height, spec.width})};

    for (Index y = 0; y < spec.height; ++y) {
      for (Index x = 0; x < spec.width; ++x) {
        const bool inside = double(x) >= gt.x && double(x) < gt.x + gt.w &&
                            double(y) >= gt.y && double(y) < gt.y + gt.h;
        for (int c = 0; c < 3; ++c) {
          float v;
          if (rgb_blackout) {
            v = 0.1f;
          } else if (inside) {
            const Index lx = Index(double(x) - gt.x) % tex_side;
            const Index ly = Index(double(y) - gt.y) % tex_side;
            v = target_tex[std::size_t(c)].at2(ly, lx);
          } else {
            v = bg_rgb[std::size_t(c)].at2(y, x);
          }
          pair.rgb.at3(c, y, x) = float(std::min(1.0, std::max(0.0, double(v) * illum)));
        }
        float tv = float(spec.tir_background);
        if (inside && !tir_crossover) tv += float(spec.tir_contrast);
        for (int c = 0; c < 3; ++c) pair.tir.at3(c, y, x) = tv;
      }
    }

    if (occlusion) {
      // Opaque strip through the middle third of the target, both modalities.
      const Index y0 = Index(gt.y + gt.h / 3.0), y1 = Index(gt.y + 2.0 * gt.h / 3.0);
      const Index x0 = Index(std::max(0.0, gt.x - 4.0));
      const Index x1 = Index(std::min(double(spec.width), gt.x + gt.w + 4.0));
      for (Index y = y0; y < y1; ++y)
        for (Index x = x0; x < x1; ++x)
          for (int c = 0; c < 3; ++c) {
            pair.rgb.at3(c, y, x) = 0.05f;
            pair.tir.at3(c, y, x) = 0.05f;
          }
    }

    frames.push_back(SynthFrame{std::move(pair), gt});
  }
  return frames;
}

void write_sequence_file(const std::string& path, const std::vector<SynthFrame>& frames) {
  if (frames.empty()) throw ContractError("write_sequence_file: no frames");
  const Index h = frames[0].pair.height(), w = frames[0].pair.width();
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open sequence file '" + path + "' for writing");
  os.write(kSeqMagic, sizeof(kSeqMagic));
  const std::uint32_t n = std::uint32_t(frames.size()), hh = std::uint32_t(h),
                      ww = std::uint32_t(w);
  os.write(reinterpret_cast<const char*>(&n), 4);
  os.write(reinterpret_cast<const char*>(&hh), 4);
  os.write(reinterpret_cast<const char*>(&ww), 4);
  for (const SynthFrame& f : frames) {
    if (f.pair.height() != h || f.pair.width() != w)
      throw ContractError("write_sequence_file: inconsistent frame sizes");
    os.write(reinterpret_cast<const char*>(f.pair.rgb.data()),
             std::streamsize(f.pair.rgb.numel() * 4));
    // Thermal data is replicated across channels; store one plane.
    os.write(reinterpret_cast<const char*>(f.pair.tir.data()), std::streamsize(h * w * 4));
    const float box[4] = {float(f.gt.x), float(f.gt.y), float(f.gt.w), float(f.gt.h)};
    os.write(reinterpret_cast<const char*>(box), 16);
  }
  if (!os) throw IoError("write failed for sequence file '" + path + "'");
}

std::vector<SynthFrame> read_sequence_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open sequence file '" + path + "'");
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kSeqMagic, 8) != 0)
    throw IoError("sequence file '" + path + "': bad magic");
  std::uint32_t n = 0, h = 0, w = 0;
  is.read(reinterpret_cast<char*>(&n), 4);
  is.read(reinterpret_cast<char*>(&h), 4);
  is.read(reinterpret_cast<char*>(&w), 4);
  if (!is || n == 0 || h == 0 || w == 0)
    throw IoError("sequence file '" + path + "': bad header");
  std::vector<SynthFrame> frames;
  frames.reserve(n);
  for (std::uint32_t i = 0; i < n; ++i) {
    SynthFrame f{FramePair{Tensor<float>({3, Index(h), Index(w)}),
                           Tensor<float>({3, Index(h), Index(w)})},
                 Box()};
    is.read(reinterpret_cast<char*>(f.pair.rgb.data()), std::streamsize(3 * h * w * 4));
    std::vector<float> tir_plane(std::size_t(h) * w);
    is.read(reinterpret_cast<char*>(tir_plane.data()), std::streamsize(h * w * 4));
    for (int c = 0; c < 3; ++c)
      std::memcpy(f.pair.tir.data() + Index(c) * h * w, tir_plane.data(),
                  tir_plane.size() * 4);
    float box[4];
    is.read(reinterpret_cast<char*>(box), 16);
    if (!is) throw IoError("sequence file '" + path + "': truncated at frame " +
                           std::to_string(i));
    f.gt = Box{box[0], box[1], box[2], box[3]};
    frames.push_back(std::move(f));
  }
  return frames;
}

void write_gt_sidecar(const std::string& path, const std::vector<SynthFrame>& frames) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot open gt file '" + path + "' for writing");
  os.precision(10);
  for (const SynthFrame& f : frames)
    os << f.gt.x << ',' << f.gt.y << ',' << f.gt.w << ',' << f.gt.h << '\n';
  if (!os) throw IoError("write failed for gt file '" + path + "'");
}

}  // namespace cstnet
