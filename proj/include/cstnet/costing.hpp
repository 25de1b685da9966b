// Copyright 2026 The cstnet Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "cstnet/config.hpp"
#include "cstnet/model.hpp"

namespace cstnet {

/// Parameter and multiply-accumulate totals with a backbone/fusion/head
/// breakdown. MAC counts cover the matmul and convolution kernels of one
/// full forward pass (both modalities, all insertions, head); norms,
/// activations and elementwise work carry no MACs. The 2*MAC convention
/// (one multiply + one add counted separately) is reported alongside.
struct CostReport {
  std::uint64_t backbone_params = 0, fusion_params = 0, head_params = 0;
  std::uint64_t total_params = 0;
  std::uint64_t backbone_macs = 0, fusion_macs = 0, head_macs = 0;
  std::uint64_t total_macs = 0;
  std::map<std::string, std::uint64_t> param_namespaces;

  std::uint64_t total_flops_2mac() const { return 2 * total_macs; }
};

namespace detail {

inline const char* cost_bucket(const std::string& name) {
  if (name.rfind("fusion.", 0) == 0) return "fusion";
  if (name.rfind("head.", 0) == 0) return "head";
  return "backbone";  // patch_embed, pos.*, backbone.*
}

inline std::string top_namespace(const std::string& name) {
  const auto dot = name.find('.');
  return dot == std::string::npos ? name : name.substr(0, dot);
}

}  // namespace detail

/// Exact trainable-parameter totals of a built model, grouped by namespace.
/// Batch-norm running statistics are buffers and are not counted.
template <typename S>
CostReport count_params(Model<S>& model) {
  CostReport r;
  for (Parameter<S>* p : model.reg.all()) {
    if (!p->trainable) continue;
    const std::uint64_t n = std::uint64_t(p->value.numel());
    const std::string bucket = detail::cost_bucket(p->name);
    if (bucket == std::string("fusion")) r.fusion_params += n;
    else if (bucket == std::string("head")) r.head_params += n;
    else r.backbone_params += n;
    r.param_namespaces[detail::top_namespace(p->name)] += n;
    r.total_params += n;
  }
  return r;
}

/// Analytic MAC count of one forward pass, traced symbolically from the
/// configuration. Mirrors the executed kernels exactly; the kernel tally
/// test pins the equivalence.
inline CostReport count_flops(const ModelConfig& cfg) {
  cfg.validate();
  CostReport r;
  const std::uint64_t c = std::uint64_t(cfg.channels);
  const std::uint64_t nx = std::uint64_t(cfg.search_tokens());
  const std::uint64_t nz = std::uint64_t(cfg.template_tokens());
  const std::uint64_t n = nx + nz;
  const std::uint64_t p2 = std::uint64_t(cfg.patch) * std::uint64_t(cfg.patch);

  // patch embedding, both regions, both modalities
  r.backbone_macs += 2 * (nx + nz) * (3 * p2) * c;

  // transformer blocks, both modalities
  const std::uint64_t mlp = std::uint64_t(cfg.mlp_ratio);
  const std::uint64_t per_block =
      4 * n * c * c            // q, k, v, proj
      + 2 * n * n * c          // logits and attention-value products
      + 2 * mlp * n * c * c;   // mlp fc1 + fc2
  r.backbone_macs += 2 * std::uint64_t(cfg.depth) * per_block;

  // fusion stages
  if (cfg.fusion_enabled()) {
    const std::uint64_t gim_h = std::uint64_t(cfg.gim_hidden());
    const std::uint64_t se_h = c / std::uint64_t(cfg.se_ratio);
    auto jscfm_macs = [&](std::uint64_t tokens) {
      std::uint64_t m = 0;
      m += tokens * 2 * c * c;           // fuse 2C -> C
      m += c * se_h + se_h * c;          // SE MLP on the pooled vector
      m += tokens * c * c;               // lsa fc_in
      m += tokens * c * c;               // lsa 1x1 conv
      m += tokens * c * (9 + 25 + 49);   // depthwise 3/5/7
      m += tokens * c * c;               // lsa post 1x1 conv
      m += tokens * c * c;               // lsa fc_out
      m += 2 * tokens * 2 * c * gim_h;   // GIM fc1 + fc2
      return m;
    };
    auto sfm_macs = [&](std::uint64_t tokens) {
      std::uint64_t m = 0;
      m += 2 * tokens * c * 9;            // LPU depthwise, both modalities
      m += 2 * tokens * c * 2 * c;        // expand
      m += 2 * tokens * c * c;            // q
      m += 2 * tokens * c * 2 * c;        // kv
      m += 4 * tokens * tokens * c;       // cross-attention products
      m += 2 * tokens * c * c;            // shared out
      m += tokens * c * (1 + 9);          // CFN depthwise 1/3
      m += 2 * (tokens * 2 * c * c);      // CFN up + down
      m += 2 * tokens * c * c;            // CFN adj + res
      return m;
    };
    const std::uint64_t per_insertion =
        jscfm_macs(nx) + sfm_macs(nx) + jscfm_macs(nz) + sfm_macs(nz);
    r.fusion_macs += std::uint64_t(cfg.insertions.size()) * per_insertion;
  }

  // head: three branches over the search grid
  {
    const std::uint64_t cells = nx;
    std::uint64_t per_branch = 0;
    std::uint64_t in = c;
    for (Index ch : cfg.head_schedule()) {
      per_branch += 9 * cells * in * std::uint64_t(ch);
      in = std::uint64_t(ch);
    }
    r.head_macs += 3 * per_branch + cells * in * (1 + 2 + 2);
  }

  r.total_macs = r.backbone_macs + r.fusion_macs + r.head_macs;
  return r;
}

}  // namespace cstnet
