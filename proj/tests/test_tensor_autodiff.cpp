// Copyright 2026 The cstnet Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>

#include "cstnet/gradcheck.hpp"
#include "cstnet/ops.hpp"
#include "cstnet/rng.hpp"
#include "oracles.hpp"

using namespace cstnet;

namespace {

template <typename S>
Tensor<S> random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<S> t(std::move(shape));
  rng.fill_uniform(t, lo, hi);
  return t;
}

// Finite-difference validation harness for a single op. `build` maps input
// Vars to the op output; the scalar objective is sum(out * r) for a fixed
// random weighting r so every output element influences the loss.
double fd_check_op(const std::vector<Shape>& input_shapes,
                   const std::function<Var<double>(Tape<double>&, std::vector<Var<double>>&)>& build,
                   Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<Parameter<double>> params;
  params.reserve(input_shapes.size());
  for (std::size_t i = 0; i < input_shapes.size(); ++i) {
    params.emplace_back("in" + std::to_string(i), random_tensor<double>(input_shapes[i], rng, lo, hi));
  }
  Tensor<double> weighting;
  bool have_weighting = false;

  auto run = [&](bool with_backward) -> double {
    Tape<double> t;
    std::vector<Var<double>> ins;
    for (auto& p : params) ins.push_back(t.param(p));
    Var<double> out = build(t, ins);
    if (!have_weighting) {
      Rng wr(999);
      weighting = random_tensor<double>(out.shape(), wr, 0.5, 1.5);
      have_weighting = true;
    }
    Var<double> loss = ops::sum(ops::mul(out, t.constant(weighting)));
    if (with_backward) {
      for (auto& p : params) p.zero_grad();
      t.backward(loss);
    }
    return loss.value()[0];
  };

  run(true);
  std::vector<CoordRef<double>> coords;
  for (auto& p : params)
    for (Index i = 0; i < p.value.numel(); ++i) coords.push_back({&p, i});
  auto rep = finite_diff_check<double>([&] { return run(false); }, coords, 1e-5);
  return rep.max_rel_err;
}

}  // namespace

TEST_CASE("matmul basics and oracle") {
  Tape<float> t;

  SUBCASE("identity times B returns B") {
    Tensor<float> id({3, 3});
    for (Index i = 0; i < 3; ++i) id.at2(i, i) = 1.0f;
    Rng rng(1);
    Tensor<float> b = random_tensor<float>({3, 5}, rng);
    auto r = ops::matmul(t.leaf(id), t.leaf(b));
    CHECK(oracles::max_abs_diff(r.value(), b) == 0.0);
  }

  SUBCASE("1x1 scalar product") {
    auto r = ops::matmul(t.leaf(Tensor<float>({1, 1}, {2.0f})),
                         t.leaf(Tensor<float>({1, 1}, {3.0f})));
    CHECK(r.value()[0] == doctest::Approx(6.0f));
  }

  SUBCASE("random 5x4 * 4x3 vs triple-loop oracle") {
    Rng rng(7);
    Tensor<float> a = random_tensor<float>({5, 4}, rng);
    Tensor<float> b = random_tensor<float>({4, 3}, rng);
    auto r = ops::matmul(t.leaf(a), t.leaf(b));
    CHECK(oracles::max_abs_diff(r.value(), oracles::matmul(a, b)) < 1e-6);
  }

  SUBCASE("shape mismatch names both shapes") {
    auto a = t.leaf(Tensor<float>({2, 3}));
    auto b = t.leaf(Tensor<float>({4, 2}));
    CHECK_THROWS_WITH_AS(ops::matmul(a, b),
                         doctest::Contains("(2x3)"), ShapeError);
    try {
      ops::matmul(a, b);
    } catch (const ShapeError& e) {
      CHECK(std::string(e.what()).find("(4x2)") != std::string::npos);
    }
  }
}

TEST_CASE("conv2d basics and oracles") {
  Tape<float> t;
  Rng rng(11);

  SUBCASE("1x1 identity kernel reproduces the input") {
    Tensor<float> x = random_tensor<float>({1, 6, 5}, rng);
    Tensor<float> w({1, 1, 1, 1}, {1.0f});
    auto y = ops::conv2d(t.leaf(x), t.leaf(w), 1);
    CHECK(oracles::max_abs_diff(y.value(), x) == 0.0);
  }

  SUBCASE("all-zero weights give all-zero output") {
    Tensor<float> x = random_tensor<float>({3, 4, 4}, rng);
    Tensor<float> w({2, 3, 3, 3});
    auto y = ops::conv2d(t.leaf(x), t.leaf(w), 1);
    for (Index i = 0; i < y.value().numel(); ++i) CHECK(y.value()[i] == 0.0f);
  }

  SUBCASE("random depthwise 3x3 vs direct oracle") {
    Tensor<float> x = random_tensor<float>({3, 8, 8}, rng);
    Tensor<float> w = random_tensor<float>({3, 1, 3, 3}, rng);
    auto y = ops::conv2d(t.leaf(x), t.leaf(w), 3);
    CHECK(oracles::max_abs_diff(y.value(), oracles::conv2d(x, w, {}, 3)) < 1e-5);
  }

  SUBCASE("even kernel size rejected") {
    auto x = t.leaf(Tensor<float>({2, 4, 4}));
    auto w = t.leaf(Tensor<float>({2, 2, 2, 2}));
    CHECK_THROWS_AS(ops::conv2d(x, w, 1), ConfigError);
  }

  SUBCASE("channel/group mismatch rejected") {
    auto x = t.leaf(Tensor<float>({3, 4, 4}));
    auto w = t.leaf(Tensor<float>({2, 3, 3, 3}));
    CHECK_THROWS_AS(ops::conv2d(x, w, 2), ShapeError);
  }

  SUBCASE("groups=1 equals im2col+matmul for k in {1,3,5,7}") {
    for (Index k : {1, 3, 5, 7}) {
      Tensor<float> x = random_tensor<float>({4, 16, 16}, rng);
      Tensor<float> w = random_tensor<float>({3, 4, k, k}, rng);
      std::vector<float> bias = {0.1f, -0.2f, 0.3f};
      Tensor<float> bt({3}, bias);
      auto y = ops::conv2d(t.leaf(x), t.leaf(w), t.leaf(bt), 1);
      CHECK(oracles::max_abs_diff(y.value(), oracles::conv2d_im2col(x, w, bias)) < 1e-5);
    }
  }

  SUBCASE("grouped conv vs direct oracle") {
    Tensor<float> x = random_tensor<float>({4, 6, 6}, rng);
    Tensor<float> w = random_tensor<float>({6, 2, 3, 3}, rng);
    auto y = ops::conv2d(t.leaf(x), t.leaf(w), 2);
    CHECK(oracles::max_abs_diff(y.value(), oracles::conv2d(x, w, {}, 2)) < 1e-5);
  }
}

TEST_CASE("softmax_rows") {
  Tape<float> t;

  SUBCASE("single column is all ones") {
    auto y = ops::softmax_rows(t.leaf(Tensor<float>({4, 1}, {3.f, -1.f, 0.f, 9.f})));
    for (Index i = 0; i < 4; ++i) CHECK(y.value()[i] == doctest::Approx(1.0f));
  }

  SUBCASE("equal logits give uniform weights") {
    auto y = ops::softmax_rows(t.leaf(Tensor<float>({1, 4}, {2.f, 2.f, 2.f, 2.f})));
    for (Index i = 0; i < 4; ++i) CHECK(y.value()[i] == doctest::Approx(0.25f));
  }

  SUBCASE("large logits do not overflow") {
    auto y = ops::softmax_rows(t.leaf(Tensor<float>({1, 2}, {1000.f, 0.f})));
    CHECK(std::abs(double(y.value()[0]) - 1.0) < 1e-12);
    CHECK(std::abs(double(y.value()[1]) - 0.0) < 1e-12);
  }

  SUBCASE("NaN input raises a numeric-domain error") {
    Tensor<float> x({1, 2}, {std::nanf(""), 0.f});
    CHECK_THROWS_AS(ops::softmax_rows(t.leaf(x)), NumericError);
  }

  SUBCASE("rows sum to one for magnitude-1e3 logits") {
    Rng rng(3);
    Tensor<float> x = random_tensor<float>({6, 9}, rng, -1e3, 1e3);
    auto y = ops::softmax_rows(t.leaf(x));
    for (Index r = 0; r < 6; ++r) {
      double s = 0.0;
      for (Index j = 0; j < 9; ++j) {
        CHECK(y.value().at2(r, j) >= 0.0f);
        s += y.value().at2(r, j);
      }
      CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
    }
  }

  SUBCASE("shift invariance") {
    Rng rng(5);
    Tensor<float> x = random_tensor<float>({3, 7}, rng);
    Tensor<float> xs = x;
    for (Index i = 0; i < xs.numel(); ++i) xs[i] += 13.25f;
    auto y0 = ops::softmax_rows(t.leaf(x));
    auto y1 = ops::softmax_rows(t.leaf(xs));
    CHECK(oracles::max_abs_diff(y0.value(), y1.value()) < 1e-6);
  }
}

TEST_CASE("backward basics") {
  SUBCASE("grad of sum is all ones") {
    Tape<float> t;
    Rng rng(2);
    Parameter<float> p("x", random_tensor<float>({3, 4}, rng));
    auto loss = ops::sum(t.param(p));
    t.backward(loss);
    for (Index i = 0; i < p.grad.numel(); ++i) CHECK(p.grad[i] == 1.0f);
  }

  SUBCASE("grad of sum of squares at [1,2] is [2,4]") {
    Tape<float> t;
    Parameter<float> p("x", Tensor<float>({2}, {1.f, 2.f}));
    auto x = t.param(p);
    auto loss = ops::sum(ops::mul(x, x));
    t.backward(loss);
    CHECK(p.grad[0] == doctest::Approx(2.0f));
    CHECK(p.grad[1] == doctest::Approx(4.0f));
  }

  SUBCASE("non-scalar loss is rejected") {
    Tape<float> t;
    auto x = t.leaf(Tensor<float>({2, 2}));
    CHECK_THROWS_AS(t.backward(x), ContractError);
  }

  SUBCASE("two identical passes produce bit-identical gradients") {
    Rng rng(4);
    Tensor<float> init = random_tensor<float>({5, 3}, rng);
    Tensor<float> w = random_tensor<float>({3, 3}, rng);
    auto run = [&](Parameter<float>& p) {
      Tape<float> t;
      auto h = ops::matmul(t.param(p), t.leaf(w));
      auto y = ops::gelu(ops::softmax_rows(h));
      t.backward(ops::sum(ops::mul(y, y)));
    };
    Parameter<float> p1("x", init), p2("x", init);
    run(p1);
    run(p2);
    for (Index i = 0; i < p1.grad.numel(); ++i) CHECK(p1.grad[i] == p2.grad[i]);
  }

  SUBCASE("backward is linear over objectives") {
    Rng rng(6);
    Tensor<float> init = random_tensor<float>({4, 4}, rng);
    const float a = 1.7f, b = -0.6f;
    auto grads = [&](int mode) {  // 0: f, 1: g, 2: a*f + b*g
      Parameter<float> p("x", init);
      Tape<float> t;
      auto x = t.param(p);
      auto f = ops::sum(ops::mul(x, x));
      auto g = ops::sum(ops::sigmoid(x));
      Var<float> loss;
      if (mode == 0) loss = f;
      else if (mode == 1) loss = g;
      else loss = ops::add(ops::affine(f, a, 0.f), ops::affine(g, b, 0.f));
      t.backward(loss);
      return p.grad;
    };
    auto gf = grads(0), gg = grads(1), gc = grads(2);
    for (Index i = 0; i < gf.numel(); ++i)
      CHECK(double(gc[i]) == doctest::Approx(a * double(gf[i]) + b * double(gg[i])).epsilon(1e-6));
  }

  SUBCASE("repeated backward after reset is deterministic") {
    Rng rng(8);
    Parameter<float> p("x", random_tensor<float>({3, 3}, rng));
    Tape<float> t;
    auto y = ops::gelu(ops::matmul(t.param(p), t.param(p)));
    auto loss = ops::sum(y);
    t.backward(loss);
    Tensor<float> first = p.grad;
    p.zero_grad();
    t.backward(loss);
    for (Index i = 0; i < first.numel(); ++i) CHECK(first[i] == p.grad[i]);
  }
}

TEST_CASE("finite_diff_check contract") {
  SUBCASE("quadratic form with exact gradient") {
    Rng rng(12);
    Parameter<double> p("x", random_tensor<double>({6}, rng));
    Tensor<double> a = random_tensor<double>({6}, rng, 0.5, 2.0);
    auto f = [&] {
      double acc = 0.0;
      for (Index i = 0; i < 6; ++i) acc += a[i] * p.value[i] * p.value[i];
      return acc;
    };
    p.ensure_grad();
    for (Index i = 0; i < 6; ++i) p.grad[i] = 2.0 * a[i] * p.value[i];
    std::vector<CoordRef<double>> coords;
    for (Index i = 0; i < 6; ++i) coords.push_back({&p, i});
    auto rep = finite_diff_check<double>(f, coords, 1e-4);
    CHECK(rep.max_rel_err < 1e-9);
  }

  SUBCASE("sign-flipped backward rule yields relative error of about 2") {
    Rng rng(13);
    Parameter<double> p("x", random_tensor<double>({4}, rng, 0.5, 1.5));
    auto f = [&] {
      double acc = 0.0;
      for (Index i = 0; i < 4; ++i) acc += p.value[i] * p.value[i];
      return acc;
    };
    p.ensure_grad();
    for (Index i = 0; i < 4; ++i) p.grad[i] = -2.0 * p.value[i];  // wrong sign
    std::vector<CoordRef<double>> coords{{&p, 0}, {&p, 1}, {&p, 2}, {&p, 3}};
    auto rep = finite_diff_check<double>(f, coords, 1e-5);
    CHECK(rep.max_rel_err == doctest::Approx(2.0).epsilon(1e-4));
  }

  SUBCASE("layer-norm output sum") {
    Rng rng(14);
    Parameter<double> px("x", random_tensor<double>({5, 8}, rng));
    Parameter<double> pg("gamma", random_tensor<double>({8}, rng, 0.5, 1.5));
    Parameter<double> pb("beta", random_tensor<double>({8}, rng));
    auto run = [&](bool bw) {
      Tape<double> t;
      auto y = ops::layer_norm(t.param(px), t.param(pg), t.param(pb), 1e-6);
      auto loss = ops::sum(y);
      if (bw) {
        px.zero_grad();
        pg.zero_grad();
        pb.zero_grad();
        t.backward(loss);
      }
      return loss.value()[0];
    };
    run(true);
    std::vector<CoordRef<double>> coords;
    for (Index i = 0; i < px.value.numel(); ++i) coords.push_back({&px, i});
    for (Index i = 0; i < 8; ++i) coords.push_back({&pg, i});
    auto rep = finite_diff_check<double>([&] { return run(false); }, coords, 1e-5);
    CHECK(rep.max_rel_err < 1e-6);
  }

  SUBCASE("non-deterministic objective is rejected") {
    Parameter<double> p("x", Tensor<double>({1}, {1.0}));
    int calls = 0;
    auto f = [&] { return double(++calls); };
    std::vector<CoordRef<double>> coords{{&p, 0}};
    CHECK_THROWS_AS(finite_diff_check<double>(f, coords, 1e-5), DeterminismError);
  }
}

TEST_CASE("finite-difference validation of every op backward rule") {
  Rng rng(42);
  using V = Var<double>;
  using Vars = std::vector<V>;

  auto check = [&](const std::vector<Shape>& shapes,
                   std::function<V(Tape<double>&, Vars&)> build, double lo = -1.0,
                   double hi = 1.0, double tol = 1e-6) {
    CAPTURE(shapes.size());
    CHECK(fd_check_op(shapes, build, rng, lo, hi) < tol);
  };

  check({{3, 4}, {3, 4}}, [](Tape<double>&, Vars& v) { return ops::add(v[0], v[1]); });
  check({{3, 4}, {3, 4}}, [](Tape<double>&, Vars& v) { return ops::sub(v[0], v[1]); });
  check({{3, 4}, {3, 4}}, [](Tape<double>&, Vars& v) { return ops::mul(v[0], v[1]); });
  check({{3, 4}, {3, 4}}, [](Tape<double>&, Vars& v) { return ops::div(v[0], v[1]); }, 0.5, 2.0);
  check({{3, 4}, {3, 4}}, [](Tape<double>&, Vars& v) { return ops::min_elem(v[0], v[1]); });
  check({{3, 4}, {3, 4}}, [](Tape<double>&, Vars& v) { return ops::max_elem(v[0], v[1]); });
  check({{3, 4}}, [](Tape<double>&, Vars& v) { return ops::affine(v[0], 2.5, -1.0); });
  check({{3, 4}}, [](Tape<double>&, Vars& v) { return ops::relu(v[0]); }, 0.05, 1.0);
  check({{3, 4}}, [](Tape<double>&, Vars& v) { return ops::sigmoid(v[0]); });
  check({{3, 4}}, [](Tape<double>&, Vars& v) { return ops::gelu(v[0]); });
  check({{3, 4}}, [](Tape<double>&, Vars& v) { return ops::exp_op(v[0]); });
  check({{3, 4}}, [](Tape<double>&, Vars& v) { return ops::log_op(v[0]); }, 0.2, 2.0);
  check({{3, 4}}, [](Tape<double>&, Vars& v) { return ops::abs_op(v[0]); }, 0.1, 1.0);
  check({{3, 4}}, [](Tape<double>&, Vars& v) { return ops::clamp(v[0], -0.4, 0.4); }, -0.35,
        0.35);
  check({{4, 3}, {3}}, [](Tape<double>&, Vars& v) { return ops::add_rowvec(v[0], v[1]); });
  check({{4, 3}, {3}}, [](Tape<double>&, Vars& v) { return ops::rowscale(v[0], v[1]); });
  check({{3, 4}}, [](Tape<double>&, Vars& v) { return ops::mean(v[0]); });
  check({{4, 3}}, [](Tape<double>&, Vars& v) { return ops::col_mean(v[0]); });
  check({{3, 4}}, [](Tape<double>&, Vars& v) { return ops::select(v[0], 7); });
  check({{3, 4}}, [](Tape<double>&, Vars& v) { return ops::reshape(v[0], {4, 3}); });
  check({{3, 4}}, [](Tape<double>&, Vars& v) { return ops::transpose(v[0]); });
  check({{2, 3}, {4, 3}},
        [](Tape<double>&, Vars& v) { return ops::concat_rows(v[0], v[1]); });
  check({{5, 3}}, [](Tape<double>&, Vars& v) { return ops::slice_rows(v[0], 1, 4); });
  check({{3, 2}, {3, 5}},
        [](Tape<double>&, Vars& v) { return ops::concat_cols(v[0], v[1]); });
  check({{3, 6}}, [](Tape<double>&, Vars& v) { return ops::slice_cols(v[0], 2, 5); });
  check({{6, 4}}, [](Tape<double>&, Vars& v) { return ops::tokens_to_image(v[0], 2, 3); });
  check({{4, 2, 3}}, [](Tape<double>&, Vars& v) { return ops::image_to_tokens(v[0]); });
  check({{3, 4, 4}}, [](Tape<double>&, Vars& v) { return ops::patchify(v[0], 2); });
  check({{3, 4}, {4, 5}}, [](Tape<double>&, Vars& v) { return ops::matmul(v[0], v[1]); });
  check({{3, 4}, {5, 4}}, [](Tape<double>&, Vars& v) { return ops::matmul_nt(v[0], v[1]); });
  check({{3, 5}}, [](Tape<double>&, Vars& v) { return ops::softmax_rows(v[0]); });
  check({{4, 6}, {6}, {6}}, [](Tape<double>&, Vars& v) {
    return ops::layer_norm(v[0], v[1], v[2], 1e-6);
  });
  // conv2d with bias, groups 1 and depthwise
  check({{2, 3, 3, 3}, {3, 6, 6}, {2}}, [](Tape<double>&, Vars& v) {
    return ops::conv2d(v[1], v[0], v[2], 1);
  });
  check({{4, 1, 3, 3}, {4, 5, 5}, {4}}, [](Tape<double>&, Vars& v) {
    return ops::conv2d(v[1], v[0], v[2], 4);
  });

  // batch norm, train and eval modes
  {
    Parameter<double> rm("rm", Tensor<double>({5}));
    Parameter<double> rv("rv", Tensor<double>::full({5}, 1.0));
    check({{6, 5}, {5}, {5}}, [&](Tape<double>&, Vars& v) {
      return ops::batch_norm(v[0], v[1], v[2], rm, rv, 1e-5, 0.1, true);
    });
    Rng statrng(77);
    rng.fill_uniform(rm.value, -0.5, 0.5);
    rng.fill_uniform(rv.value, 0.5, 2.0);
    check({{6, 5}, {5}, {5}}, [&](Tape<double>&, Vars& v) {
      return ops::batch_norm(v[0], v[1], v[2], rm, rv, 1e-5, 0.1, false);
    });
  }
}

TEST_CASE("tensor shape invariants") {
  CHECK_THROWS_AS(Tensor<float>({0, 3}), ShapeError);
  CHECK_THROWS_AS(Tensor<float>(Shape{}), ShapeError);
  CHECK_THROWS_AS(Tensor<float>({2, 2}, {1.f, 2.f, 3.f}), ShapeError);
  Tensor<float> t({2, 3});
  CHECK(t.numel() == 6);
  CHECK_THROWS_AS(t.reshaped({4, 2}), ShapeError);
  CHECK(t.reshaped({3, 2}).extent(0) == 3);
}
