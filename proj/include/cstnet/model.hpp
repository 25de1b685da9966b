// Copyright 2026 The cstnet Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>
#include <vector>

#include "cstnet/backbone.hpp"
#include "cstnet/checkpoint.hpp"
#include "cstnet/config.hpp"
#include "cstnet/fusion.hpp"
#include "cstnet/head.hpp"

namespace cstnet {

/// Final-block token slices of both modality streams.
template <typename S>
struct JointOutput {
  Tokens<S> rgb_search, rgb_template, tir_search, tir_template;
};

/// The assembled tracker: shared-weight bilateral backbone, one fusion stage
/// per insertion layer (full variant only), and the center head.
///
/// Both modality streams run through the same block parameters; fusion stages
/// splice the template and search slices separately and put them back before
/// the next block.
template <typename S>
class Model {
 public:
  ModelConfig cfg;
  ParamRegistry<S> reg;
  Backbone<S> backbone;
  std::vector<FusionStage<S>> fusion;  // parallel to cfg.insertions when enabled
  CenterHead<S> head;

  Model(const ModelConfig& config, std::uint64_t seed) : cfg(config) {
    cfg.validate();
    Rng rng(seed);
    backbone = Backbone<S>::create(reg, cfg, rng);
    if (cfg.fusion_enabled()) {
      for (Index layer : cfg.insertions)
        fusion.push_back(FusionStage<S>::create(reg, "fusion.layer" + std::to_string(layer),
                                                cfg.channels, cfg.se_ratio, cfg.gim_hidden(),
                                                cfg.cam_heads, rng));
    }
    head = CenterHead<S>::create(reg, cfg.channels, cfg.head_schedule(), rng);
  }

  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  /// Embeds an image into positioned tokens for its region.
  Tokens<S> embed(Tape<S>& t, const Tensor<S>& image, Region region, Stream stream) const {
    return backbone.add_positional(backbone.patch_embed(t, image, region, stream));
  }

  /// Runs the concatenated [search; template] sequences of both modalities
  /// through all blocks, applying fusion after each configured layer.
  JointOutput<S> joint_forward_tokens(const Tokens<S>& z_r, const Tokens<S>& x_r,
                                      const Tokens<S>& z_t, const Tokens<S>& x_t,
                                      bool training) const {
    const Index nx = cfg.search_tokens(), nz = cfg.template_tokens();
    if (x_r.count() != nx || z_r.count() != nz || x_t.count() != nx || z_t.count() != nz)
      throw ContractError("joint_forward: token counts do not match the configuration");

    Var<S> h_r = ops::concat_rows(x_r.v, z_r.v);
    Var<S> h_t = ops::concat_rows(x_t.v, z_t.v);

    const std::vector<Index> ins = cfg.effective_insertions();
    std::size_t fi = 0;
    for (Index i = 1; i <= cfg.depth; ++i) {
      const ViTBlock<S>& block = backbone.blocks[std::size_t(i - 1)];
      h_r = block(h_r);
      h_t = block(h_t);
      if (fi < ins.size() && ins[fi] == i) {
        const FusionStage<S>& stage = fusion[fi];
        Tokens<S> xr{ops::slice_rows(h_r, 0, nx), cfg.search_grid(), Region::Search, Stream::Rgb};
        Tokens<S> zr{ops::slice_rows(h_r, nx, nx + nz), cfg.template_grid(), Region::Template,
                     Stream::Rgb};
        Tokens<S> xt{ops::slice_rows(h_t, 0, nx), cfg.search_grid(), Region::Search, Stream::Tir};
        Tokens<S> zt{ops::slice_rows(h_t, nx, nx + nz), cfg.template_grid(), Region::Template,
                     Stream::Tir};
        auto [zr2, zt2] = stage(zr, zt, training);
        auto [xr2, xt2] = stage(xr, xt, training);
        h_r = ops::concat_rows(xr2.v, zr2.v);
        h_t = ops::concat_rows(xt2.v, zt2.v);
        ++fi;
      }
    }
    h_r = backbone.norm(h_r);
    h_t = backbone.norm(h_t);

    JointOutput<S> out{
        {ops::slice_rows(h_r, 0, nx), cfg.search_grid(), Region::Search, Stream::Rgb},
        {ops::slice_rows(h_r, nx, nx + nz), cfg.template_grid(), Region::Template, Stream::Rgb},
        {ops::slice_rows(h_t, 0, nx), cfg.search_grid(), Region::Search, Stream::Tir},
        {ops::slice_rows(h_t, nx, nx + nz), cfg.template_grid(), Region::Template, Stream::Tir}};
    return out;
  }

  JointOutput<S> joint_forward(Tape<S>& t, const Tensor<S>& z_r_img, const Tensor<S>& x_r_img,
                               const Tensor<S>& z_t_img, const Tensor<S>& x_t_img,
                               bool training) const {
    return joint_forward_tokens(embed(t, z_r_img, Region::Template, Stream::Rgb),
                                embed(t, x_r_img, Region::Search, Stream::Rgb),
                                embed(t, z_t_img, Region::Template, Stream::Tir),
                                embed(t, x_t_img, Region::Search, Stream::Tir), training);
  }

  /// Full pass from four images to head outputs.
  HeadOut<S> forward_pair(Tape<S>& t, const Tensor<S>& z_r, const Tensor<S>& x_r,
                          const Tensor<S>& z_t, const Tensor<S>& x_t, bool training) const {
    JointOutput<S> jo = joint_forward(t, z_r, x_r, z_t, x_t, training);
    Tokens<S> mixed = fuse_search_outputs(jo.rgb_search, jo.tir_search);
    return head(mixed, training);
  }

  /// Head outputs from cached template tokens plus fresh search images.
  HeadOut<S> forward_search(Tape<S>& t, const Tokens<S>& z_r, const Tokens<S>& z_t,
                            const Tensor<S>& x_r_img, const Tensor<S>& x_t_img,
                            bool training) const {
    JointOutput<S> jo = joint_forward_tokens(
        z_r, embed(t, x_r_img, Region::Search, Stream::Rgb), z_t,
        embed(t, x_t_img, Region::Search, Stream::Tir), training);
    Tokens<S> mixed = fuse_search_outputs(jo.rgb_search, jo.tir_search);
    return head(mixed, training);
  }

  // -------------------------------------------------------------------------
  // Checkpoint interchange.
  // -------------------------------------------------------------------------

  Checkpoint to_checkpoint() {
    Checkpoint ckpt;
    for (Parameter<S>* p : reg.all()) {
      CkptEntry e;
      e.name = p->name;
      e.shape = p->value.shape();
      e.data.resize(std::size_t(p->value.numel()));
      for (Index i = 0; i < p->value.numel(); ++i) e.data[std::size_t(i)] = float(p->value[i]);
      ckpt.entries.push_back(std::move(e));
    }
    ckpt.sort_entries();
    return ckpt;
  }

  /// Strict load: every checkpoint entry must match a parameter by name and
  /// shape, and every parameter must be covered. Offenders are enumerated.
  void load_checkpoint(const Checkpoint& ckpt) {
    std::vector<std::string> missing, extra, mismatched;
    for (Parameter<S>* p : reg.all())
      if (!ckpt.find(p->name)) missing.push_back(p->name);
    for (const CkptEntry& e : ckpt.entries) {
      Parameter<S>* p = reg.find(e.name);
      if (!p) {
        extra.push_back(e.name);
        continue;
      }
      if (p->value.shape() != e.shape)
        mismatched.push_back(e.name + " (" + shape_str(e.shape) + " vs " +
                             shape_str(p->value.shape()) + ")");
    }
    if (!missing.empty() || !extra.empty() || !mismatched.empty()) {
      std::string msg = "checkpoint does not match the model:";
      auto append = [&](const char* label, const std::vector<std::string>& names) {
        if (names.empty()) return;
        msg += std::string(" ") + label + ":";
        for (const auto& n : names) msg += " " + n;
        msg += ";";
      };
      append("missing", missing);
      append("unexpected", extra);
      append("shape-mismatch", mismatched);
      throw IoError(msg);
    }
    for (const CkptEntry& e : ckpt.entries) {
      Parameter<S>* p = reg.find(e.name);
      for (Index i = 0; i < p->value.numel(); ++i) p->value[i] = S(e.data[std::size_t(i)]);
    }
  }
};

}  // namespace cstnet
