// Copyright 2026 The cstnet Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>
#include <vector>

#include "cstnet/error.hpp"
#include "cstnet/layers.hpp"
#include "cstnet/tokens.hpp"

namespace cstnet {

enum class Variant { Full, Small };

/// Every architectural hyperparameter of the tracker.
struct ModelConfig {
  Variant variant = Variant::Full;
  Index channels = 768;
  Index depth = 12;
  Index heads = 12;
  Index mlp_ratio = 4;
  Index patch = 16;
  Index template_side = 128;
  Index search_side = 256;
  std::vector<Index> insertions = {4, 7, 10};  // 1-based; fusion runs after the block
  Index se_ratio = 4;
  double gim_ratio = 0.5;  // GIM hidden width as a fraction of the 2C concat
  Index cam_heads = 1;
  std::vector<Index> head_channels;  // empty selects C/2 -> C/4 -> C/8
  AttnScale scale_mode = AttnScale::PerHead;

  // tracking-runtime knobs
  double template_area_factor = 2.0;
  double search_area_factor = 4.0;

  Index gim_hidden() const { return Index(gim_ratio * double(2 * channels)); }
  Grid template_grid() const { return {template_side / patch, template_side / patch}; }
  Grid search_grid() const { return {search_side / patch, search_side / patch}; }
  Index template_tokens() const { return template_grid().count(); }
  Index search_tokens() const { return search_grid().count(); }
  Index joint_tokens() const { return template_tokens() + search_tokens(); }

  std::vector<Index> head_schedule() const {
    if (!head_channels.empty()) return head_channels;
    return {channels / 2, channels / 4, channels / 8};
  }

  bool fusion_enabled() const { return variant == Variant::Full && !insertions.empty(); }

  /// Insertion layers actually applied (empty for the small variant).
  std::vector<Index> effective_insertions() const {
    return variant == Variant::Small ? std::vector<Index>{} : insertions;
  }

  void validate() const {
    if (channels < 1 || depth < 1) throw ConfigError("config: channels and depth must be >= 1");
    if (template_side % patch != 0 || search_side % patch != 0)
      throw ConfigError("config: template/search sides must be divisible by patch stride " +
                        std::to_string(patch));
    if (heads < 1 || channels % heads != 0)
      throw ConfigError("config: channels " + std::to_string(channels) +
                        " not divisible by heads " + std::to_string(heads));
    for (Index l : insertions)
      if (l < 1 || l > depth)
        throw ConfigError("config: insertion layer " + std::to_string(l) +
                          " outside [1, " + std::to_string(depth) + "]");
    if (se_ratio < 1 || channels % se_ratio != 0)
      throw ConfigError("config: SE ratio must divide channels");
    if (gim_hidden() < 1) throw ConfigError("config: GIM hidden width must be >= 1");
    if (cam_heads < 1 || channels % cam_heads != 0)
      throw ConfigError("config: cam heads must divide channels");
    for (Index c : head_schedule())
      if (c < 1) throw ConfigError("config: head channel schedule must be positive");
  }

  static ModelConfig full() { return ModelConfig{}; }

  static ModelConfig small() {
    ModelConfig c;
    c.variant = Variant::Small;
    return c;
  }

  /// Desk-scale configuration: all oracle and gradient checks run on it.
  static ModelConfig tiny() {
    ModelConfig c;
    c.channels = 64;
    c.depth = 4;
    c.heads = 4;
    c.patch = 8;
    c.template_side = 32;
    c.search_side = 64;
    c.insertions = {2};
    return c;
  }

  static ModelConfig tiny_small() {
    ModelConfig c = tiny();
    c.variant = Variant::Small;
    return c;
  }
};

}  // namespace cstnet
