// Copyright 2026 The cstnet Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <deque>
#include <optional>
#include <string>
#include <vector>

#include "cstnet/ops.hpp"
#include "cstnet/rng.hpp"
#include "cstnet/tape.hpp"

namespace cstnet {

enum class Init { TruncNormal, Zeros, Ones };

/// Owns every parameter and buffer of a model under dotted-path names.
/// Registration order is construction order, which also fixes the RNG draw
/// order, so the same (config, seed) always yields identical parameters.
template <typename S>
class ParamRegistry {
 public:
  Parameter<S>& add(const std::string& name, Shape shape, Init init, Rng& rng,
                    bool trainable = true) {
    for (const auto& p : params_)
      if (p.name == name) throw ConfigError("duplicate parameter name '" + name + "'");
    Tensor<S> value(std::move(shape));
    switch (init) {
      case Init::TruncNormal: rng.fill_trunc_normal(value, 0.02); break;
      case Init::Zeros: break;
      case Init::Ones: value.fill(S(1)); break;
    }
    params_.emplace_back(name, std::move(value), trainable);
    return params_.back();
  }

  std::vector<Parameter<S>*> all() {
    std::vector<Parameter<S>*> out;
    for (auto& p : params_) out.push_back(&p);
    return out;
  }

  std::vector<Parameter<S>*> trainable() {
    std::vector<Parameter<S>*> out;
    for (auto& p : params_)
      if (p.trainable) out.push_back(&p);
    return out;
  }

  Parameter<S>* find(const std::string& name) {
    for (auto& p : params_)
      if (p.name == name) return &p;
    return nullptr;
  }

  Index total_count(bool trainable_only = true) const {
    Index n = 0;
    for (const auto& p : params_)
      if (!trainable_only || p.trainable) n += p.value.numel();
    return n;
  }

  void zero_grads() {
    for (auto& p : params_) p.zero_grad();
  }

 private:
  std::deque<Parameter<S>> params_;  // deque keeps references stable
};

// ---------------------------------------------------------------------------
// Layers. Each holds pointers into the owning registry; forwards are free of
// hidden state apart from batch-norm running buffers.
// ---------------------------------------------------------------------------

template <typename S>
struct Linear {
  Parameter<S>* weight = nullptr;  // [out x in]
  Parameter<S>* bias = nullptr;    // [out]

  static Linear create(ParamRegistry<S>& reg, const std::string& prefix, Index in, Index out,
                       Rng& rng) {
    Linear l;
    l.weight = &reg.add(prefix + ".weight", {out, in}, Init::TruncNormal, rng);
    l.bias = &reg.add(prefix + ".bias", {out}, Init::Zeros, rng);
    return l;
  }

  Index in_dim() const { return weight->value.extent(1); }
  Index out_dim() const { return weight->value.extent(0); }

  /// x[N x in] -> x W^T + b.
  Var<S> operator()(Var<S> x) const {
    auto& t = *x.tape;
    if (x.shape().size() != 2 || x.shape()[1] != in_dim())
      throw ShapeError("linear '" + weight->name + "': input " + shape_str(x.shape()) +
                       " vs weight " + shape_str(weight->value.shape()));
    return ops::add_rowvec(ops::matmul_nt(x, t.param(*weight)), t.param(*bias));
  }
};

template <typename S>
struct LayerNorm {
  Parameter<S>* gamma = nullptr;
  Parameter<S>* beta = nullptr;
  S eps = S(1e-6);

  static LayerNorm create(ParamRegistry<S>& reg, const std::string& prefix, Index c, Rng& rng) {
    LayerNorm n;
    n.gamma = &reg.add(prefix + ".gamma", {c}, Init::Ones, rng);
    n.beta = &reg.add(prefix + ".beta", {c}, Init::Zeros, rng);
    return n;
  }

  Var<S> operator()(Var<S> x) const {
    auto& t = *x.tape;
    return ops::layer_norm(x, t.param(*gamma), t.param(*beta), eps);
  }
};

template <typename S>
struct BatchNorm {
  Parameter<S>* gamma = nullptr;
  Parameter<S>* beta = nullptr;
  Parameter<S>* run_mean = nullptr;
  Parameter<S>* run_var = nullptr;
  S eps = S(1e-5);
  S momentum = S(0.1);

  static BatchNorm create(ParamRegistry<S>& reg, const std::string& prefix, Index c, Rng& rng) {
    BatchNorm n;
    n.gamma = &reg.add(prefix + ".gamma", {c}, Init::Ones, rng);
    n.beta = &reg.add(prefix + ".beta", {c}, Init::Zeros, rng);
    n.run_mean = &reg.add(prefix + ".running_mean", {c}, Init::Zeros, rng, false);
    n.run_var = &reg.add(prefix + ".running_var", {c}, Init::Ones, rng, false);
    return n;
  }

  /// Token layout [N x C]; statistics are taken over the token axis.
  Var<S> operator()(Var<S> x, bool training) const {
    auto& t = *x.tape;
    return ops::batch_norm(x, t.param(*gamma), t.param(*beta), *run_mean, *run_var, eps,
                           momentum, training);
  }
};

/// Convolution on a [C x H x W] grid, optionally followed by batch norm
/// (in which case the convolution itself carries no bias).
template <typename S>
struct ConvBlock {
  Parameter<S>* weight = nullptr;  // [C_out x C_in/g x k x k]
  Parameter<S>* bias = nullptr;    // null when bn is present
  std::optional<BatchNorm<S>> bn;
  Index groups = 1;

  static ConvBlock create(ParamRegistry<S>& reg, const std::string& prefix, Index c_in,
                          Index c_out, Index k, Index groups, bool with_bn, Rng& rng) {
    if (c_in % groups != 0 || c_out % groups != 0)
      throw ConfigError("conv '" + prefix + "': channels not divisible by groups");
    ConvBlock c;
    c.groups = groups;
    c.weight = &reg.add(prefix + ".weight", {c_out, c_in / groups, k, k}, Init::TruncNormal, rng);
    if (with_bn)
      c.bn = BatchNorm<S>::create(reg, prefix + ".bn", c_out, rng);
    else
      c.bias = &reg.add(prefix + ".bias", {c_out}, Init::Zeros, rng);
    return c;
  }

  Var<S> operator()(Var<S> img, bool training) const {
    auto& t = *img.tape;
    Var<S> y = bias ? ops::conv2d(img, t.param(*weight), t.param(*bias), groups)
                    : ops::conv2d(img, t.param(*weight), groups);
    if (bn) {
      const Index c = y.shape()[0], rows = y.shape()[1], cols = y.shape()[2];
      y = ops::tokens_to_image((*bn)(ops::image_to_tokens(y), training), rows, cols);
      (void)c;
    }
    return y;
  }
};

enum class AttnScale { PerHead, GlobalSqrtC };

/// Scaled dot-product attention over pre-projected Q/K/V token matrices:
/// per head, softmax(Q K^T * scale) V; heads are column blocks, concatenated
/// back in order.
template <typename S>
Var<S> attention_core(Var<S> q, Var<S> k, Var<S> v, Index heads, S scale) {
  const Index c = q.shape()[1];
  if (heads < 1 || c % heads != 0)
    throw ConfigError("attention_core: C=" + std::to_string(c) + " not divisible by heads=" +
                      std::to_string(heads));
  const Index d = c / heads;
  Var<S> merged;
  for (Index h = 0; h < heads; ++h) {
    Var<S> qh = ops::slice_cols(q, h * d, (h + 1) * d);
    Var<S> kh = ops::slice_cols(k, h * d, (h + 1) * d);
    Var<S> vh = ops::slice_cols(v, h * d, (h + 1) * d);
    Var<S> attn = ops::softmax_rows(ops::affine(ops::matmul_nt(qh, kh), scale, S(0)));
    Var<S> oh = ops::matmul(attn, vh);
    merged = h == 0 ? oh : ops::concat_cols(merged, oh);
  }
  return merged;
}

template <typename S>
struct MultiHeadAttention {
  Linear<S> q, k, v, proj;
  Index heads = 1;
  AttnScale scale_mode = AttnScale::PerHead;

  static MultiHeadAttention create(ParamRegistry<S>& reg, const std::string& prefix, Index c,
                                   Index heads, AttnScale scale_mode, Rng& rng) {
    if (heads < 1 || c % heads != 0)
      throw ConfigError("attention '" + prefix + "': C=" + std::to_string(c) +
                        " not divisible by heads=" + std::to_string(heads));
    MultiHeadAttention a;
    a.heads = heads;
    a.scale_mode = scale_mode;
    a.q = Linear<S>::create(reg, prefix + ".q", c, c, rng);
    a.k = Linear<S>::create(reg, prefix + ".k", c, c, rng);
    a.v = Linear<S>::create(reg, prefix + ".v", c, c, rng);
    a.proj = Linear<S>::create(reg, prefix + ".proj", c, c, rng);
    return a;
  }

  S logit_scale(Index c) const {
    const Index d = c / heads;
    return scale_mode == AttnScale::PerHead ? S(1) / std::sqrt(S(d)) : S(1) / std::sqrt(S(c));
  }

  /// softmax(Q K^T * scale) V per head, heads concatenated, output-projected.
  Var<S> operator()(Var<S> tokens) const {
    const Index c = tokens.shape()[1];
    return proj(attention_core(q(tokens), k(tokens), v(tokens), heads, logit_scale(c)));
  }
};

enum class ActKind { Gelu, Relu, Sigmoid };

template <typename S>
Var<S> activation(ActKind kind, Var<S> x) {
  switch (kind) {
    case ActKind::Gelu: return ops::gelu(x);
    case ActKind::Relu: return ops::relu(x);
    case ActKind::Sigmoid: return ops::sigmoid(x);
  }
  throw ConfigError("unknown activation kind");
}

/// Per-channel mean over tokens (adaptive average pooling to 1x1).
template <typename S>
Var<S> adaptive_avg_pool(Var<S> tokens) {
  return ops::col_mean(tokens);
}

}  // namespace cstnet
