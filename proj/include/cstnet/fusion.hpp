// Copyright 2026 The cstnet Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <utility>

#include "cstnet/layers.hpp"
#include "cstnet/tokens.hpp"

// Cross-modal fusion blocks. A fusion stage fuses the aligned RGB/TIR token
// matrices of one region (template or search): the joint spatial-channel
// module first, then the spatial module, cascaded.
namespace cstnet {

/// Global integration: concat the two modalities along channels, add an MLP
/// residual, split back. Template and search paths own distinct instances.
template <typename S>
struct Gim {
  Linear<S> fc1;  // 2C -> hidden
  Linear<S> fc2;  // hidden -> 2C

  static Gim create(ParamRegistry<S>& reg, const std::string& prefix, Index c, Index hidden,
                    Rng& rng) {
    Gim g;
    g.fc1 = Linear<S>::create(reg, prefix + ".fc1", 2 * c, hidden, rng);
    g.fc2 = Linear<S>::create(reg, prefix + ".fc2", hidden, 2 * c, rng);
    return g;
  }
};

/// Joint spatial and channel fusion: linear fuse, SE channel gate and
/// multi-kernel local spatial aggregation in parallel, shared residual onto
/// both modalities, then global integration.
template <typename S>
struct Jscfm {
  Linear<S> fuse;  // 2C -> C
  Linear<S> se_fc1, se_fc2;
  Linear<S> lsa_fc_in;
  ConvBlock<S> lsa_conv1;  // 1x1 + BN
  ConvBlock<S> lsa_dw3, lsa_dw5, lsa_dw7;  // depthwise + BN
  ConvBlock<S> lsa_conv2;  // 1x1 with bias, GELU after
  Linear<S> lsa_fc_out;
  Gim<S> gim_template, gim_search;

  static Jscfm create(ParamRegistry<S>& reg, const std::string& prefix, Index c,
                      Index se_ratio, Index gim_hidden, Rng& rng) {
    if (se_ratio < 1 || c % se_ratio != 0)
      throw ConfigError("jscfm '" + prefix + "': SE ratio " + std::to_string(se_ratio) +
                        " must divide C=" + std::to_string(c));
    Jscfm j;
    j.fuse = Linear<S>::create(reg, prefix + ".fuse", 2 * c, c, rng);
    j.se_fc1 = Linear<S>::create(reg, prefix + ".se.fc1", c, c / se_ratio, rng);
    j.se_fc2 = Linear<S>::create(reg, prefix + ".se.fc2", c / se_ratio, c, rng);
    j.lsa_fc_in = Linear<S>::create(reg, prefix + ".lsa.fc_in", c, c, rng);
    j.lsa_conv1 = ConvBlock<S>::create(reg, prefix + ".lsa.conv1", c, c, 1, 1, true, rng);
    j.lsa_dw3 = ConvBlock<S>::create(reg, prefix + ".lsa.dw3", c, c, 3, c, true, rng);
    j.lsa_dw5 = ConvBlock<S>::create(reg, prefix + ".lsa.dw5", c, c, 5, c, true, rng);
    j.lsa_dw7 = ConvBlock<S>::create(reg, prefix + ".lsa.dw7", c, c, 7, c, true, rng);
    j.lsa_conv2 = ConvBlock<S>::create(reg, prefix + ".lsa.conv2", c, c, 1, 1, false, rng);
    j.lsa_fc_out = Linear<S>::create(reg, prefix + ".lsa.fc_out", c, c, rng);
    j.gim_template = Gim<S>::create(reg, prefix + ".template_gim", c, gim_hidden, rng);
    j.gim_search = Gim<S>::create(reg, prefix + ".search_gim", c, gim_hidden, rng);
    return j;
  }
};

/// Channel gate: sigmoid(MLP(avgpool(xc))) broadcast over tokens.
template <typename S>
Var<S> se_enhance(const Jscfm<S>& p, Var<S> xc) {
  auto& t = *xc.tape;
  (void)t;
  Var<S> pooled = ops::reshape(adaptive_avg_pool(xc), {1, xc.shape()[1]});
  Var<S> gate = ops::sigmoid(p.se_fc2(ops::relu(p.se_fc1(pooled))));
  return ops::rowscale(xc, gate);
}

/// Local spatial aggregation over the token grid: a 1x1 branch plus summed
/// depthwise 3/5/7 branches, then 1x1 + GELU and a final linear.
template <typename S>
Var<S> lsa(const Jscfm<S>& p, Var<S> xc, Grid grid, bool training) {
  Var<S> fc = p.lsa_fc_in(xc);
  Var<S> img = ops::tokens_to_image(fc, grid.rows, grid.cols);
  Var<S> msf = ops::add(ops::add(p.lsa_conv1(img, training), p.lsa_dw3(img, training)),
                        ops::add(p.lsa_dw5(img, training), p.lsa_dw7(img, training)));
  Var<S> act = ops::gelu(p.lsa_conv2(msf, training));
  return p.lsa_fc_out(ops::image_to_tokens(act));
}

/// Concat along channels, add the MLP residual, split back to (rgb, tir).
template <typename S>
std::pair<Var<S>, Var<S>> gim(const Gim<S>& g, Var<S> xr_res, Var<S> xt_res) {
  const Index c = xr_res.shape()[1];
  Var<S> cat = ops::concat_cols(xr_res, xt_res);
  Var<S> out = ops::add(cat, g.fc2(ops::gelu(g.fc1(cat))));
  return {ops::slice_cols(out, 0, c), ops::slice_cols(out, c, 2 * c)};
}

template <typename S>
std::pair<Tokens<S>, Tokens<S>> jscfm_forward(const Jscfm<S>& p, const Tokens<S>& xr,
                                              const Tokens<S>& xt, bool training) {
  check_aligned(xr, xt, "jscfm_forward");
  if (xr.region == Region::Joint)
    throw ContractError("jscfm_forward: fusion applies to template or search slices only");
  Var<S> xc = p.fuse(ops::concat_cols(xr.v, xt.v));
  Var<S> xc_add = ops::add(se_enhance(p, xc), lsa(p, xc, xr.grid, training));
  Var<S> xr_res = ops::add(xr.v, xc_add);
  Var<S> xt_res = ops::add(xt.v, xc_add);
  const Gim<S>& g = xr.region == Region::Template ? p.gim_template : p.gim_search;
  auto [r, t] = gim(g, xr_res, xt_res);
  return {xr.with(r), xt.with(t)};
}

/// Spatial fusion: local perception, bidirectional cross attention with a
/// shared expand/output pair, modality summation, and a convolutional
/// feedforward whose result is added back onto both original streams.
template <typename S>
struct Sfm {
  ConvBlock<S> lpu_dw;  // depthwise 3x3 with bias, shared by both modalities
  Linear<S> cam_expand;  // C -> 2C, shared
  Linear<S> cam_q_rgb, cam_q_tir;    // C -> C
  Linear<S> cam_kv_rgb, cam_kv_tir;  // C -> 2C
  Linear<S> cam_out;  // C -> C, shared
  LayerNorm<S> cam_ln_rgb, cam_ln_tir;
  Index cam_heads = 1;
  ConvBlock<S> cfn_dw1, cfn_dw3;
  ConvBlock<S> cfn_up;    // 1x1 C -> 2C
  ConvBlock<S> cfn_down;  // 1x1 2C -> C
  ConvBlock<S> cfn_adj, cfn_res;
  BatchNorm<S> cfn_bn;

  static Sfm create(ParamRegistry<S>& reg, const std::string& prefix, Index c, Index cam_heads,
                    Rng& rng) {
    if (cam_heads < 1 || c % cam_heads != 0)
      throw ConfigError("sfm '" + prefix + "': C not divisible by cam heads");
    Sfm s;
    s.cam_heads = cam_heads;
    s.lpu_dw = ConvBlock<S>::create(reg, prefix + ".lpu.dw", c, c, 3, c, false, rng);
    s.cam_expand = Linear<S>::create(reg, prefix + ".cam.expand", c, 2 * c, rng);
    s.cam_q_rgb = Linear<S>::create(reg, prefix + ".cam.q_rgb", c, c, rng);
    s.cam_q_tir = Linear<S>::create(reg, prefix + ".cam.q_tir", c, c, rng);
    s.cam_kv_rgb = Linear<S>::create(reg, prefix + ".cam.kv_rgb", c, 2 * c, rng);
    s.cam_kv_tir = Linear<S>::create(reg, prefix + ".cam.kv_tir", c, 2 * c, rng);
    s.cam_out = Linear<S>::create(reg, prefix + ".cam.out", c, c, rng);
    s.cam_ln_rgb = LayerNorm<S>::create(reg, prefix + ".cam.ln_rgb", c, rng);
    s.cam_ln_tir = LayerNorm<S>::create(reg, prefix + ".cam.ln_tir", c, rng);
    s.cfn_dw1 = ConvBlock<S>::create(reg, prefix + ".cfn.dw1", c, c, 1, c, false, rng);
    s.cfn_dw3 = ConvBlock<S>::create(reg, prefix + ".cfn.dw3", c, c, 3, c, false, rng);
    s.cfn_up = ConvBlock<S>::create(reg, prefix + ".cfn.up", c, 2 * c, 1, 1, false, rng);
    s.cfn_down = ConvBlock<S>::create(reg, prefix + ".cfn.down", 2 * c, c, 1, 1, false, rng);
    s.cfn_adj = ConvBlock<S>::create(reg, prefix + ".cfn.adj", c, c, 1, 1, false, rng);
    s.cfn_res = ConvBlock<S>::create(reg, prefix + ".cfn.res", c, c, 1, 1, false, rng);
    s.cfn_bn = BatchNorm<S>::create(reg, prefix + ".cfn.bn", c, rng);
    return s;
  }

  /// The cross-attention logit scale: 1/sqrt(C) single-head, 1/sqrt(d) per head.
  S cam_scale(Index c) const {
    return cam_heads == 1 ? S(1) / std::sqrt(S(c)) : S(1) / std::sqrt(S(c / cam_heads));
  }
};

/// Residual local perception: x + DWConv3x3(x) over the token grid.
template <typename S>
Var<S> lpu(const Sfm<S>& p, Var<S> x, Grid grid, bool training) {
  Var<S> img = ops::tokens_to_image(x, grid.rows, grid.cols);
  return ops::add(x, ops::image_to_tokens(p.lpu_dw(img, training)));
}

/// Intermediate cross-attention values exposed for verification.
template <typename S>
struct CamTrace {
  Var<S> cross_rgb, cross_tir;
  Var<S> value_rgb, value_tir;
};

/// Cross-attention module: per modality, split a shared nonlinear expansion
/// into a residual and an attention half, project Q/K/V per modality, swap
/// modalities in the attention, and re-project through the shared output
/// layer with a per-modality layer norm.
template <typename S>
std::pair<Var<S>, Var<S>> cam(const Sfm<S>& p, Var<S> xr_cfm, Var<S> xt_cfm, Grid grid,
                              bool training, CamTrace<S>* trace = nullptr) {
  const Index c = xr_cfm.shape()[1];
  Var<S> lpu_r = lpu(p, xr_cfm, grid, training);
  Var<S> lpu_t = lpu(p, xt_cfm, grid, training);

  Var<S> er = ops::relu(p.cam_expand(lpu_r));
  Var<S> et = ops::relu(p.cam_expand(lpu_t));
  Var<S> res_r = ops::slice_cols(er, 0, c), attn_r = ops::slice_cols(er, c, 2 * c);
  Var<S> res_t = ops::slice_cols(et, 0, c), attn_t = ops::slice_cols(et, c, 2 * c);

  Var<S> q_r = p.cam_q_rgb(attn_r);
  Var<S> kv_r = p.cam_kv_rgb(attn_r);
  Var<S> k_r = ops::slice_cols(kv_r, 0, c), v_r = ops::slice_cols(kv_r, c, 2 * c);
  Var<S> q_t = p.cam_q_tir(attn_t);
  Var<S> kv_t = p.cam_kv_tir(attn_t);
  Var<S> k_t = ops::slice_cols(kv_t, 0, c), v_t = ops::slice_cols(kv_t, c, 2 * c);

  const S scale = p.cam_scale(c);
  Var<S> cross_r = attention_core(q_r, k_t, v_t, p.cam_heads, scale);
  Var<S> cross_t = attention_core(q_t, k_r, v_r, p.cam_heads, scale);
  if (trace) *trace = CamTrace<S>{cross_r, cross_t, v_r, v_t};

  Var<S> out_r = p.cam_ln_rgb(ops::add(xr_cfm, p.cam_out(ops::add(cross_r, res_r))));
  Var<S> out_t = p.cam_ln_tir(ops::add(xt_cfm, p.cam_out(ops::add(cross_t, res_t))));
  return {out_r, out_t};
}

/// Convolutional feedforward on the merged feature: depthwise 1/3 residual,
/// pointwise up/GELU/down residual, then the batch-normed adjust+skip pair.
template <typename S>
Var<S> cfn(const Sfm<S>& p, Var<S> x_rt_add, Grid grid, bool training) {
  Var<S> img = ops::tokens_to_image(x_rt_add, grid.rows, grid.cols);
  Var<S> local = ops::add(
      x_rt_add, ops::image_to_tokens(ops::add(p.cfn_dw1(img, training), p.cfn_dw3(img, training))));
  Var<S> limg = ops::tokens_to_image(local, grid.rows, grid.cols);
  Var<S> act = ops::add(
      local, ops::image_to_tokens(p.cfn_down(ops::gelu(p.cfn_up(limg, training)), training)));
  Var<S> aimg = ops::tokens_to_image(act, grid.rows, grid.cols);
  Var<S> adj = ops::add(p.cfn_adj(aimg, training), p.cfn_res(aimg, training));
  return p.cfn_bn(ops::image_to_tokens(adj), training);
}

/// Full spatial fusion stage. `xr_orig`/`xt_orig` are the block outputs the
/// preceding joint fusion consumed; the shared adjusted feature is added to
/// both, which preserves their elementwise difference.
template <typename S>
std::pair<Tokens<S>, Tokens<S>> sfm_forward(const Sfm<S>& p, const Tokens<S>& xr_cfm,
                                            const Tokens<S>& xt_cfm, const Tokens<S>& xr_orig,
                                            const Tokens<S>& xt_orig, bool training) {
  check_aligned(xr_cfm, xt_cfm, "sfm_forward");
  check_aligned(xr_orig, xt_orig, "sfm_forward originals");
  if (xr_cfm.region != xr_orig.region || xr_cfm.v.shape() != xr_orig.v.shape())
    throw ContractError("sfm_forward: originals do not match the fused inputs");

  auto [add_r, add_t] = cam(p, xr_cfm.v, xt_cfm.v, xr_cfm.grid, training);
  Var<S> x_rt_add = ops::add(add_r, add_t);
  Var<S> adj = cfn(p, x_rt_add, xr_cfm.grid, training);
  return {xr_orig.with(ops::add(adj, xr_orig.v)), xt_orig.with(ops::add(adj, xt_orig.v))};
}

/// One insertion point: JSCFM then SFM on the same region pair.
template <typename S>
struct FusionStage {
  Jscfm<S> jscfm;
  Sfm<S> sfm;

  static FusionStage create(ParamRegistry<S>& reg, const std::string& prefix, Index c,
                            Index se_ratio, Index gim_hidden, Index cam_heads, Rng& rng) {
    FusionStage f;
    f.jscfm = Jscfm<S>::create(reg, prefix + ".jscfm", c, se_ratio, gim_hidden, rng);
    f.sfm = Sfm<S>::create(reg, prefix + ".sfm", c, cam_heads, rng);
    return f;
  }

  std::pair<Tokens<S>, Tokens<S>> operator()(const Tokens<S>& xr, const Tokens<S>& xt,
                                             bool training) const {
    auto [r_cfm, t_cfm] = jscfm_forward(jscfm, xr, xt, training);
    return sfm_forward(sfm, r_cfm, t_cfm, xr, xt, training);
  }
};

}  // namespace cstnet
