// Copyright 2026 The cstnet Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <vector>

#include "cstnet/config.hpp"
#include "cstnet/layers.hpp"
#include "cstnet/tokens.hpp"

namespace cstnet {

/// Pre-norm transformer block: x += attn(ln(x)); x += mlp(ln(x)).
template <typename S>
struct ViTBlock {
  LayerNorm<S> norm1, norm2;
  MultiHeadAttention<S> attn;
  Linear<S> fc1, fc2;

  static ViTBlock create(ParamRegistry<S>& reg, const std::string& prefix, Index c, Index heads,
                         Index mlp_ratio, AttnScale scale_mode, Rng& rng) {
    ViTBlock b;
    b.norm1 = LayerNorm<S>::create(reg, prefix + ".norm1", c, rng);
    b.attn = MultiHeadAttention<S>::create(reg, prefix + ".attn", c, heads, scale_mode, rng);
    b.norm2 = LayerNorm<S>::create(reg, prefix + ".norm2", c, rng);
    b.fc1 = Linear<S>::create(reg, prefix + ".mlp.fc1", c, c * mlp_ratio, rng);
    b.fc2 = Linear<S>::create(reg, prefix + ".mlp.fc2", c * mlp_ratio, c, rng);
    return b;
  }

  Var<S> operator()(Var<S> x) const {
    x = ops::add(x, attn(norm1(x)));
    return ops::add(x, fc2(ops::gelu(fc1(norm2(x)))));
  }
};

/// Patch embedding, learned positional embeddings per region, and the block
/// stack. One instance serves both modality streams (shared weights).
template <typename S>
struct Backbone {
  Linear<S> patch_proj;  // 3*p*p -> C
  Parameter<S>* pos_template = nullptr;  // [N_z x C], shared by RGB and TIR
  Parameter<S>* pos_search = nullptr;    // [N_x x C]
  std::vector<ViTBlock<S>> blocks;
  LayerNorm<S> norm;
  Index patch = 16;

  static Backbone create(ParamRegistry<S>& reg, const ModelConfig& cfg, Rng& rng) {
    Backbone b;
    b.patch = cfg.patch;
    b.patch_proj = Linear<S>::create(reg, "patch_embed", 3 * cfg.patch * cfg.patch,
                                     cfg.channels, rng);
    b.pos_template = &reg.add("pos.template", {cfg.template_tokens(), cfg.channels},
                              Init::TruncNormal, rng);
    b.pos_search =
        &reg.add("pos.search", {cfg.search_tokens(), cfg.channels}, Init::TruncNormal, rng);
    for (Index i = 1; i <= cfg.depth; ++i)
      b.blocks.push_back(ViTBlock<S>::create(reg, "backbone.block" + std::to_string(i),
                                             cfg.channels, cfg.heads, cfg.mlp_ratio,
                                             cfg.scale_mode, rng));
    b.norm = LayerNorm<S>::create(reg, "backbone.norm", cfg.channels, rng);
    return b;
  }

  /// Non-overlapping p x p patches projected to C channels, row-major grid.
  Tokens<S> patch_embed(Tape<S>& t, const Tensor<S>& image, Region region,
                        Stream stream) const {
    if (image.rank() != 3 || image.extent(0) != 3)
      throw ShapeError("patch_embed: expected a [3 x H x W] image, got " +
                       shape_str(image.shape()));
    Var<S> patches = ops::patchify(t.leaf(image), patch);
    Var<S> tok = patch_proj(patches);
    Grid grid{image.extent(1) / patch, image.extent(2) / patch};
    return Tokens<S>{tok, grid, region, stream};
  }

  /// Adds the learned positional embedding matching the token region.
  Tokens<S> add_positional(const Tokens<S>& tokens) const {
    auto& t = *tokens.v.tape;
    Parameter<S>* pe = nullptr;
    switch (tokens.region) {
      case Region::Template: pe = pos_template; break;
      case Region::Search: pe = pos_search; break;
      case Region::Joint:
        throw ContractError("add_positional: joint sequences carry no single embedding");
    }
    if (pe->value.shape() != tokens.v.value().shape())
      throw ShapeError("add_positional: tokens " + shape_str(tokens.v.value().shape()) +
                       " vs embedding " + shape_str(pe->value.shape()));
    return tokens.with(ops::add(tokens.v, t.param(*pe)));
  }
};

// ---------------------------------------------------------------------------
// Attention-structure probes (verification surface for the joint layout).
// ---------------------------------------------------------------------------

/// Full N x N attention matrix of one head over a joint token sequence.
template <typename S>
Tensor<S> attention_matrix(const MultiHeadAttention<S>& attn, const Tensor<S>& joint_tokens,
                           Index head) {
  Tape<S> t;
  const Index c = joint_tokens.extent(1), d = c / attn.heads;
  Var<S> tok = t.leaf(joint_tokens);
  Var<S> q = ops::slice_cols(attn.q(tok), head * d, (head + 1) * d);
  Var<S> k = ops::slice_cols(attn.k(tok), head * d, (head + 1) * d);
  Var<S> a = ops::softmax_rows(
      ops::affine(ops::matmul_nt(q, k), attn.logit_scale(c), S(0)));
  return a.value();
}

/// The same matrix assembled from the four per-region logit blocks
/// [Xq Xk^T, Xq Zk^T; Zq Xk^T, Zq Zk^T] before one shared softmax.
template <typename S>
Tensor<S> attention_matrix_blocked(const MultiHeadAttention<S>& attn,
                                   const Tensor<S>& search_tokens,
                                   const Tensor<S>& template_tokens, Index head) {
  Tape<S> t;
  const Index c = search_tokens.extent(1), d = c / attn.heads;
  Var<S> x = t.leaf(search_tokens), z = t.leaf(template_tokens);
  auto headcols = [&](Var<S> m) { return ops::slice_cols(m, head * d, (head + 1) * d); };
  Var<S> qx = headcols(attn.q(x)), qz = headcols(attn.q(z));
  Var<S> kx = headcols(attn.k(x)), kz = headcols(attn.k(z));
  Var<S> top = ops::concat_cols(ops::matmul_nt(qx, kx), ops::matmul_nt(qx, kz));
  Var<S> bot = ops::concat_cols(ops::matmul_nt(qz, kx), ops::matmul_nt(qz, kz));
  Var<S> logits = ops::affine(ops::concat_rows(top, bot), attn.logit_scale(c), S(0));
  return ops::softmax_rows(logits).value();
}

}  // namespace cstnet
