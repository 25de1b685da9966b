// Copyright 2026 The cstnet Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "cstnet/costing.hpp"
#include "cstnet/model.hpp"
#include "oracles.hpp"

using namespace cstnet;

namespace {

template <typename S>
Tensor<S> random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<S> t(std::move(shape));
  rng.fill_uniform(t, lo, hi);
  return t;
}

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

// Hand-summed shape inventory for an arbitrary configuration, written as
// plain arithmetic independent of the registry.
std::uint64_t expected_param_count(const ModelConfig& cfg) {
  const std::uint64_t C = std::uint64_t(cfg.channels);
  auto linear = [](std::uint64_t in, std::uint64_t out) { return in * out + out; };
  auto norm = [&](std::uint64_t c) { return 2 * c; };
  auto conv = [](std::uint64_t ci, std::uint64_t co, std::uint64_t k, std::uint64_t g,
                 bool bn) { return co * (ci / g) * k * k + (bn ? 2 * co : co); };

  std::uint64_t total = linear(3 * cfg.patch * cfg.patch, C);
  total += std::uint64_t(cfg.template_tokens()) * C + std::uint64_t(cfg.search_tokens()) * C;
  const std::uint64_t block = norm(C) + 3 * linear(C, C) + linear(C, C) + norm(C) +
                              linear(C, cfg.mlp_ratio * C) + linear(cfg.mlp_ratio * C, C);
  total += std::uint64_t(cfg.depth) * block + norm(C);

  if (cfg.fusion_enabled()) {
    const std::uint64_t gh = std::uint64_t(cfg.gim_hidden());
    const std::uint64_t se = C / std::uint64_t(cfg.se_ratio);
    std::uint64_t jscfm = linear(2 * C, C) + linear(C, se) + linear(se, C) + linear(C, C) +
                          conv(C, C, 1, 1, true) + conv(C, C, 3, C, true) +
                          conv(C, C, 5, C, true) + conv(C, C, 7, C, true) +
                          conv(C, C, 1, 1, false) + linear(C, C) +
                          2 * (linear(2 * C, gh) + linear(gh, 2 * C));
    std::uint64_t sfm = conv(C, C, 3, C, false) + linear(C, 2 * C) + 2 * linear(C, C) +
                        2 * linear(C, 2 * C) + linear(C, C) + 2 * norm(C) +
                        conv(C, C, 1, C, false) + conv(C, C, 3, C, false) +
                        conv(C, 2 * C, 1, 1, false) + conv(2 * C, C, 1, 1, false) +
                        conv(C, C, 1, 1, false) + conv(C, C, 1, 1, false) + norm(C);
    total += std::uint64_t(cfg.insertions.size()) * (jscfm + sfm);
  }

  std::uint64_t in = C;
  std::uint64_t branch = 0;
  for (Index ch : cfg.head_schedule()) {
    branch += conv(in, std::uint64_t(ch), 3, 1, true);
    in = std::uint64_t(ch);
  }
  total += 3 * branch + conv(in, 1, 1, 1, false) + 2 * conv(in, 2, 1, 1, false);
  return total;
}

}  // namespace

TEST_CASE("build_model") {
  SUBCASE("same config and seed build bit-identical parameters") {
    Model<float> a(ModelConfig::tiny(), 7);
    Model<float> b(ModelConfig::tiny(), 7);
    auto pa = a.reg.all(), pb = b.reg.all();
    REQUIRE(pa.size() == pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i) {
      CHECK(pa[i]->name == pb[i]->name);
      CHECK(oracles::max_abs_diff(pa[i]->value, pb[i]->value) == 0.0);
    }
  }

  SUBCASE("float and double builds hold the same parameter values") {
    Model<float> a(ModelConfig::tiny(), 7);
    Model<double> b(ModelConfig::tiny(), 7);
    auto pa = a.reg.all();
    auto pb = b.reg.all();
    REQUIRE(pa.size() == pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i)
      for (Index j = 0; j < pa[i]->value.numel(); ++j)
        CHECK(double(pa[i]->value[j]) == pb[i]->value[j]);
  }

  SUBCASE("small variant has no fusion-namespace parameters") {
    Model<float> m(ModelConfig::tiny_small(), 3);
    for (auto* p : m.reg.all()) CHECK(p->name.rfind("fusion.", 0) != 0);
  }

  SUBCASE("tiny parameter count matches the hand-summed inventory") {
    Model<float> m(ModelConfig::tiny(), 3);
    CHECK(std::uint64_t(m.reg.total_count(true)) == expected_param_count(ModelConfig::tiny()));
    Model<float> s(ModelConfig::tiny_small(), 3);
    CHECK(std::uint64_t(s.reg.total_count(true)) ==
          expected_param_count(ModelConfig::tiny_small()));
  }

  SUBCASE("invalid configuration is rejected with the violated invariant") {
    ModelConfig bad = ModelConfig::tiny();
    bad.template_side = 33;
    CHECK_THROWS_WITH_AS(Model<float>(bad, 1), doctest::Contains("divisible"), ConfigError);
  }
}

TEST_CASE("count_params") {
  SUBCASE("structural identity: full minus small equals the fusion namespace") {
    Model<float> full(ModelConfig::tiny(), 5);
    Model<float> small(ModelConfig::tiny_small(), 5);
    auto rf = count_params(full);
    auto rs = count_params(small);
    CHECK(rf.total_params - rs.total_params == rf.fusion_params);
    CHECK(rs.fusion_params == 0);
    CHECK(rf.backbone_params == rs.backbone_params);
    CHECK(rf.head_params == rs.head_params);
  }
}

TEST_CASE("count_flops") {
  SUBCASE("linear layers contribute N*in*out") {
    // isolate one known term: growing the template side by one patch row
    // adds exactly the embed + block cost of the extra tokens
    auto cfg = ModelConfig::tiny();
    auto r = count_flops(cfg);
    CHECK(r.total_macs > 0);
    CHECK(r.total_flops_2mac() == 2 * r.total_macs);
  }

  SUBCASE("kernel tally matches the symbolic count on the tiny config") {
    Model<float> m(ModelConfig::tiny(), 11);
    Rng rng(1);
    Tensor<float> z_r = random_tensor<float>({3, 32, 32}, rng, 0.0, 1.0);
    Tensor<float> x_r = random_tensor<float>({3, 64, 64}, rng, 0.0, 1.0);
    Tensor<float> z_t = random_tensor<float>({3, 32, 32}, rng, 0.0, 1.0);
    Tensor<float> x_t = random_tensor<float>({3, 64, 64}, rng, 0.0, 1.0);
    Tape<float> t;
    const std::uint64_t before = kernels::mac_tally;
    m.forward_pair(t, z_r, x_r, z_t, x_t, false);
    const std::uint64_t executed = kernels::mac_tally - before;
    CHECK(executed == count_flops(ModelConfig::tiny()).total_macs);
  }

  SUBCASE("kernel tally matches on an asymmetric configuration") {
    ModelConfig cfg = ModelConfig::tiny();
    cfg.channels = 32;
    cfg.depth = 3;
    cfg.heads = 2;
    cfg.template_side = 16;
    cfg.search_side = 48;
    cfg.insertions = {1, 3};
    cfg.cam_heads = 2;
    cfg.gim_ratio = 1.0;
    cfg.se_ratio = 2;
    Model<float> m(cfg, 11);
    Rng rng(2);
    Tensor<float> z_r = random_tensor<float>({3, 16, 16}, rng, 0.0, 1.0);
    Tensor<float> x_r = random_tensor<float>({3, 48, 48}, rng, 0.0, 1.0);
    Tensor<float> z_t = random_tensor<float>({3, 16, 16}, rng, 0.0, 1.0);
    Tensor<float> x_t = random_tensor<float>({3, 48, 48}, rng, 0.0, 1.0);
    Tape<float> t;
    const std::uint64_t before = kernels::mac_tally;
    m.forward_pair(t, z_r, x_r, z_t, x_t, false);
    CHECK(kernels::mac_tally - before == count_flops(cfg).total_macs);
  }
}

TEST_CASE("checkpoint round trip") {
  const std::string path = temp_path("cstnet_test_roundtrip.ckpt");

  SUBCASE("save, load into a differently seeded model, forwards agree bit-exactly") {
    Model<float> a(ModelConfig::tiny(), 1);
    save_checkpoint_file(a.to_checkpoint(), path);
    Model<float> b(ModelConfig::tiny(), 999);
    b.load_checkpoint(load_checkpoint_file(path));

    Rng rng(4);
    Tensor<float> z = random_tensor<float>({3, 32, 32}, rng, 0.0, 1.0);
    Tensor<float> x = random_tensor<float>({3, 64, 64}, rng, 0.0, 1.0);
    Tape<float> ta, tb;
    auto oa = a.forward_pair(ta, z, x, z, x, false);
    auto ob = b.forward_pair(tb, z, x, z, x, false);
    CHECK(oracles::max_abs_diff(oa.score.value(), ob.score.value()) == 0.0);
    CHECK(oracles::max_abs_diff(oa.size.value(), ob.size.value()) == 0.0);
    std::remove(path.c_str());
  }

  SUBCASE("saving is a pure function of the parameters") {
    Model<float> a(ModelConfig::tiny_small(), 2);
    const std::string p1 = temp_path("cstnet_test_a.ckpt"), p2 = temp_path("cstnet_test_b.ckpt");
    save_checkpoint_file(a.to_checkpoint(), p1);
    save_checkpoint_file(a.to_checkpoint(), p2);
    std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
    std::vector<char> b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    std::vector<char> b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    CHECK(b1 == b2);
    // and save -> load -> save is byte-identical
    Checkpoint c = load_checkpoint_file(p1);
    save_checkpoint_file(c, p2);
    std::ifstream f3(p2, std::ios::binary);
    std::vector<char> b3((std::istreambuf_iterator<char>(f3)), std::istreambuf_iterator<char>());
    CHECK(b1 == b3);
    std::remove(p1.c_str());
    std::remove(p2.c_str());
  }

  SUBCASE("corrupting one payload byte breaks the digest") {
    Model<float> a(ModelConfig::tiny_small(), 3);
    save_checkpoint_file(a.to_checkpoint(), path);
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(64);
    char byte;
    f.seekg(64);
    f.read(&byte, 1);
    byte = char(byte ^ 0x40);
    f.seekp(64);
    f.write(&byte, 1);
    f.close();
    CHECK_THROWS_WITH_AS(load_checkpoint_file(path), doctest::Contains("digest"), IoError);
    std::remove(path.c_str());
  }

  SUBCASE("strict load of a full checkpoint into a small model enumerates the fusion entries") {
    Model<float> full(ModelConfig::tiny(), 4);
    Checkpoint ckpt = full.to_checkpoint();
    Model<float> small(ModelConfig::tiny_small(), 4);
    std::size_t fusion_entries = 0;
    for (const auto& e : ckpt.entries)
      if (e.name.rfind("fusion.", 0) == 0) ++fusion_entries;
    try {
      small.load_checkpoint(ckpt);
      FAIL("expected a load error");
    } catch (const IoError& e) {
      const std::string msg = e.what();
      CHECK(msg.find("unexpected") != std::string::npos);
      std::size_t count = 0;
      for (std::size_t pos = msg.find("fusion."); pos != std::string::npos;
           pos = msg.find("fusion.", pos + 1))
        ++count;
      CHECK(count == fusion_entries);
      CHECK(msg.find("missing") == std::string::npos);
    }
  }

  SUBCASE("strict-load completeness against sentinel initialization") {
    Model<float> a(ModelConfig::tiny_small(), 5);
    Checkpoint ckpt = a.to_checkpoint();
    Model<float> b(ModelConfig::tiny_small(), 6);
    for (auto* p : b.reg.all()) p->value.fill(7.5f);
    b.load_checkpoint(ckpt);
    for (auto* p : b.reg.all())
      for (Index i = 0; i < p->value.numel(); ++i) CHECK(p->value[i] != 7.5f);
  }
}

TEST_CASE("transfer_to_small") {
  Model<float> full(ModelConfig::tiny(), 41);
  Checkpoint ckpt_full = full.to_checkpoint();

  SUBCASE("drops exactly the fusion entries and is idempotent") {
    std::size_t fusion_entries = 0;
    for (const auto& e : ckpt_full.entries)
      if (e.name.rfind("fusion.", 0) == 0) ++fusion_entries;
    CHECK(fusion_entries > 0);

    bool noop = true;
    Checkpoint small = transfer_to_small(ckpt_full, &noop);
    CHECK(!noop);
    CHECK(ckpt_full.entries.size() - small.entries.size() == fusion_entries);

    Checkpoint again = transfer_to_small(small, &noop);
    CHECK(noop);
    CHECK(again.entries.size() == small.entries.size());
    for (std::size_t i = 0; i < again.entries.size(); ++i)
      CHECK(again.entries[i].name == small.entries[i].name);
  }

  SUBCASE("transferred weights reproduce the fusion-disabled forward bit-exactly") {
    Checkpoint small_ckpt = transfer_to_small(ckpt_full);

    Model<float> small(ModelConfig::tiny_small(), 977);
    small.load_checkpoint(small_ckpt);

    ModelConfig no_insert = ModelConfig::tiny();
    no_insert.insertions.clear();
    Model<float> disabled(no_insert, 978);
    disabled.load_checkpoint(small_ckpt);

    Rng rng(8);
    Tensor<float> z = random_tensor<float>({3, 32, 32}, rng, 0.0, 1.0);
    Tensor<float> x = random_tensor<float>({3, 64, 64}, rng, 0.0, 1.0);
    Tape<float> ta, tb;
    auto oa = small.forward_pair(ta, z, x, z, x, false);
    auto ob = disabled.forward_pair(tb, z, x, z, x, false);
    CHECK(oracles::max_abs_diff(oa.score.value(), ob.score.value()) == 0.0);
    CHECK(oracles::max_abs_diff(oa.offset.value(), ob.offset.value()) == 0.0);
    CHECK(oracles::max_abs_diff(oa.size.value(), ob.size.value()) == 0.0);
  }
}
