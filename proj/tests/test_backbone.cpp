// Copyright 2026 The cstnet Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

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

struct TinyImages {
  Tensor<float> z_r, x_r, z_t, x_t;
  explicit TinyImages(std::uint64_t seed) {
    Rng rng(seed);
    z_r = random_tensor<float>({3, 32, 32}, rng, 0.0, 1.0);
    x_r = random_tensor<float>({3, 64, 64}, rng, 0.0, 1.0);
    z_t = random_tensor<float>({3, 32, 32}, rng, 0.0, 1.0);
    x_t = random_tensor<float>({3, 64, 64}, rng, 0.0, 1.0);
  }
};

}  // namespace

TEST_CASE("patch_embed") {
  SUBCASE("token counts follow side^2 / p^2") {
    CHECK(ModelConfig::full().template_tokens() == 64);
    CHECK(ModelConfig::full().search_tokens() == 256);
    CHECK(ModelConfig::tiny().template_tokens() == 16);
    CHECK(ModelConfig::tiny().search_tokens() == 64);
  }

  Model<float> m(ModelConfig::tiny(), 3);

  SUBCASE("constant image gives identical token rows") {
    Tape<float> t;
    Tensor<float> img = Tensor<float>::full({3, 32, 32}, 0.4f);
    auto tok = m.backbone.patch_embed(t, img, Region::Template, Stream::Rgb);
    const auto& v = tok.v.value();
    for (Index r = 1; r < v.extent(0); ++r)
      for (Index j = 0; j < v.extent(1); ++j) CHECK(v.at2(r, j) == v.at2(0, j));
    CHECK(tok.grid == Grid{4, 4});
  }

  SUBCASE("indivisible extents are a configuration error") {
    Tape<float> t;
    CHECK_THROWS_AS(m.backbone.patch_embed(t, Tensor<float>({3, 30, 32}), Region::Template,
                                           Stream::Rgb),
                    ConfigError);
  }
}

TEST_CASE("add_positional") {
  Model<float> m(ModelConfig::tiny(), 5);
  Rng rng(9);
  Tape<float> t;

  SUBCASE("zero embedding is the identity") {
    m.backbone.pos_template->value.fill(0.f);
    Tensor<float> v = random_tensor<float>({16, 64}, rng);
    Tokens<float> tok{t.leaf(v), Grid{4, 4}, Region::Template, Stream::Rgb};
    auto out = m.backbone.add_positional(tok);
    CHECK(oracles::max_abs_diff(out.v.value(), v) == 0.0);
  }

  SUBCASE("zero tokens return the embedding") {
    Tokens<float> tok{t.leaf(Tensor<float>({64, 64})), Grid{8, 8}, Region::Search, Stream::Tir};
    auto out = m.backbone.add_positional(tok);
    CHECK(oracles::max_abs_diff(out.v.value(), m.backbone.pos_search->value) == 0.0);
  }

  SUBCASE("both streams share one embedding") {
    Tensor<float> img = random_tensor<float>({3, 32, 32}, rng, 0.0, 1.0);
    auto rgb = m.embed(t, img, Region::Template, Stream::Rgb);
    auto tir = m.embed(t, img, Region::Template, Stream::Tir);
    CHECK(oracles::max_abs_diff(rgb.v.value(), tir.v.value()) == 0.0);
  }

  SUBCASE("shape mismatch is a dimension error") {
    Tokens<float> tok{t.leaf(Tensor<float>({9, 64})), Grid{3, 3}, Region::Template, Stream::Rgb};
    CHECK_THROWS_AS(m.backbone.add_positional(tok), ShapeError);
  }
}

TEST_CASE("joint_forward") {
  SUBCASE("small variant: identical inputs give identical streams") {
    Model<float> m(ModelConfig::tiny_small(), 11);
    TinyImages img(1);
    Tape<float> t;
    auto out = m.joint_forward(t, img.z_r, img.x_r, img.z_r, img.x_r, false);
    CHECK(oracles::max_abs_diff(out.rgb_search.v.value(), out.tir_search.v.value()) == 0.0);
    CHECK(oracles::max_abs_diff(out.rgb_template.v.value(), out.tir_template.v.value()) == 0.0);
  }

  SUBCASE("empty insertion set equals the small variant") {
    ModelConfig cfg_empty = ModelConfig::tiny();
    cfg_empty.insertions.clear();
    Model<float> a(cfg_empty, 13);
    Model<float> b(ModelConfig::tiny_small(), 13);
    TinyImages img(2);
    Tape<float> ta, tb;
    auto oa = a.joint_forward(ta, img.z_r, img.x_r, img.z_t, img.x_t, false);
    auto ob = b.joint_forward(tb, img.z_r, img.x_r, img.z_t, img.x_t, false);
    CHECK(oracles::max_abs_diff(oa.rgb_search.v.value(), ob.rgb_search.v.value()) == 0.0);
    CHECK(oracles::max_abs_diff(oa.tir_template.v.value(), ob.tir_template.v.value()) == 0.0);
  }

  SUBCASE("staged composition reproduces the fused forward bit-exactly") {
    Model<float> m(ModelConfig::tiny(), 17);
    TinyImages img(3);
    const Index nx = m.cfg.search_tokens(), nz = m.cfg.template_tokens();

    Tape<float> t;
    auto out = m.joint_forward(t, img.z_r, img.x_r, img.z_t, img.x_t, false);

    // manual staging: blocks 1-2, fusion, blocks 3-4, norm
    Tape<float> t2;
    auto zr = m.embed(t2, img.z_r, Region::Template, Stream::Rgb);
    auto xr = m.embed(t2, img.x_r, Region::Search, Stream::Rgb);
    auto zt = m.embed(t2, img.z_t, Region::Template, Stream::Tir);
    auto xt = m.embed(t2, img.x_t, Region::Search, Stream::Tir);
    Var<float> h_r = ops::concat_rows(xr.v, zr.v);
    Var<float> h_t = ops::concat_rows(xt.v, zt.v);
    for (int i = 0; i < 2; ++i) {
      h_r = m.backbone.blocks[i](h_r);
      h_t = m.backbone.blocks[i](h_t);
    }
    Tokens<float> sxr{ops::slice_rows(h_r, 0, nx), m.cfg.search_grid(), Region::Search,
                      Stream::Rgb};
    Tokens<float> szr{ops::slice_rows(h_r, nx, nx + nz), m.cfg.template_grid(),
                      Region::Template, Stream::Rgb};
    Tokens<float> sxt{ops::slice_rows(h_t, 0, nx), m.cfg.search_grid(), Region::Search,
                      Stream::Tir};
    Tokens<float> szt{ops::slice_rows(h_t, nx, nx + nz), m.cfg.template_grid(),
                      Region::Template, Stream::Tir};
    auto [zr2, zt2] = m.fusion[0](szr, szt, false);
    auto [xr2, xt2] = m.fusion[0](sxr, sxt, false);
    h_r = ops::concat_rows(xr2.v, zr2.v);
    h_t = ops::concat_rows(xt2.v, zt2.v);
    for (int i = 2; i < 4; ++i) {
      h_r = m.backbone.blocks[i](h_r);
      h_t = m.backbone.blocks[i](h_t);
    }
    h_r = m.backbone.norm(h_r);
    h_t = m.backbone.norm(h_t);

    CHECK(oracles::max_abs_diff(out.rgb_search.v.value(),
                                ops::slice_rows(h_r, 0, nx).value()) == 0.0);
    CHECK(oracles::max_abs_diff(out.tir_search.v.value(),
                                ops::slice_rows(h_t, 0, nx).value()) == 0.0);
    CHECK(oracles::max_abs_diff(out.rgb_template.v.value(),
                                ops::slice_rows(h_r, nx, nx + nz).value()) == 0.0);
  }

  SUBCASE("token counts and channel width are conserved") {
    Model<float> m(ModelConfig::tiny(), 19);
    TinyImages img(4);
    Tape<float> t;
    auto out = m.joint_forward(t, img.z_r, img.x_r, img.z_t, img.x_t, false);
    CHECK(out.rgb_search.v.shape() == Shape{64, 64});
    CHECK(out.rgb_template.v.shape() == Shape{16, 64});
    CHECK(out.tir_search.v.shape() == Shape{64, 64});
  }

  SUBCASE("small variant is modality-symmetric: swapping inputs swaps outputs") {
    Model<float> m(ModelConfig::tiny_small(), 23);
    TinyImages img(5);
    Tape<float> t;
    auto fwd = m.joint_forward(t, img.z_r, img.x_r, img.z_t, img.x_t, false);
    auto swp = m.joint_forward(t, img.z_t, img.x_t, img.z_r, img.x_r, false);
    CHECK(oracles::max_abs_diff(fwd.rgb_search.v.value(), swp.tir_search.v.value()) == 0.0);
    CHECK(oracles::max_abs_diff(fwd.tir_search.v.value(), swp.rgb_search.v.value()) == 0.0);
  }

  SUBCASE("weight sharing: one mutation moves both streams identically") {
    Model<float> m(ModelConfig::tiny_small(), 29);
    TinyImages img(6);
    Tape<float> t;
    auto before = m.joint_forward(t, img.z_r, img.x_r, img.z_r, img.x_r, false);
    m.backbone.blocks[1].fc1.weight->value[7] += 0.25f;
    auto after = m.joint_forward(t, img.z_r, img.x_r, img.z_r, img.x_r, false);
    CHECK(oracles::max_abs_diff(after.rgb_search.v.value(), after.tir_search.v.value()) == 0.0);
    CHECK(oracles::max_abs_diff(before.rgb_search.v.value(), after.rgb_search.v.value()) > 0.0);
  }

  SUBCASE("out-of-range insertion layer is a configuration error") {
    ModelConfig bad = ModelConfig::tiny();
    bad.insertions = {9};
    CHECK_THROWS_AS(Model<float>(bad, 1), ConfigError);
  }
}

TEST_CASE("block attention structure") {
  Rng rng(31);
  ParamRegistry<float> reg;
  auto attn = MultiHeadAttention<float>::create(reg, "attn", 8, 2, AttnScale::PerHead, rng);
  for (auto* p : reg.all()) rng.fill_uniform(p->value, -0.5, 0.5);

  SUBCASE("one search and one template token") {
    Tensor<float> x = random_tensor<float>({1, 8}, rng);
    Tensor<float> z = random_tensor<float>({1, 8}, rng);
    auto blocked = attention_matrix_blocked(attn, x, z, 0);
    CHECK(blocked.shape() == Shape{2, 2});
    for (Index r = 0; r < 2; ++r)
      CHECK(blocked.at2(r, 0) + blocked.at2(r, 1) == doctest::Approx(1.0).epsilon(1e-6));
  }

  SUBCASE("zero template tokens with zero K bias attend uniformly over the template block") {
    attn.k.bias->value.fill(0.f);
    Tensor<float> x = random_tensor<float>({3, 8}, rng);
    Tensor<float> z({4, 8});  // zero tokens
    Tensor<float> joint({7, 8});
    for (Index r = 0; r < 3; ++r)
      for (Index j = 0; j < 8; ++j) joint.at2(r, j) = x.at2(r, j);
    for (Index head = 0; head < 2; ++head) {
      auto a = attention_matrix(attn, joint, head);
      for (Index r = 0; r < 7; ++r)
        for (Index cz = 4; cz < 7; ++cz)
          CHECK(a.at2(r, cz) == doctest::Approx(a.at2(r, 3)).epsilon(1e-6));
    }
  }

  SUBCASE("monolithic softmax equals the four-block assembly") {
    for (int seed = 0; seed < 5; ++seed) {
      Rng r2(100 + seed);
      Tensor<float> x = random_tensor<float>({6, 8}, r2);
      Tensor<float> z = random_tensor<float>({3, 8}, r2);
      Tensor<float> joint({9, 8});
      for (Index r = 0; r < 6; ++r)
        for (Index j = 0; j < 8; ++j) joint.at2(r, j) = x.at2(r, j);
      for (Index r = 0; r < 3; ++r)
        for (Index j = 0; j < 8; ++j) joint.at2(6 + r, j) = z.at2(r, j);
      for (Index head = 0; head < 2; ++head) {
        auto mono = attention_matrix(attn, joint, head);
        auto blocked = attention_matrix_blocked(attn, x, z, head);
        CHECK(oracles::max_abs_diff(mono, blocked) < 1e-6);
      }
    }
  }
}
