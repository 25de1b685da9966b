// Copyright 2026 The cstnet Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <optional>

#include "cstnet/kernels.hpp"
#include "cstnet/tape.hpp"

// Differentiable operations, written as expression-friendly free functions
// over tape Vars. Each op computes its output eagerly and records a backward
// rule; gradients of unused outputs are skipped during the reverse sweep.
namespace cstnet::ops {

namespace detail {

template <typename S>
Tape<S>& tape_of(Var<S> a) {
  if (!a.valid()) throw ContractError("op applied to invalid Var");
  return *a.tape;
}

template <typename S>
void require_same_tape(Var<S> a, Var<S> b) {
  if (a.tape != b.tape) throw ContractError("operands recorded on different tapes");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise binary ops (equal shapes).
// ---------------------------------------------------------------------------

template <typename S>
Var<S> add(Var<S> a, Var<S> b) {
  auto& t = detail::tape_of(a);
  detail::require_same_tape(a, b);
  const auto &A = t.value(a.id), &B = t.value(b.id);
  check_same_shape(A, B, "add");
  Tensor<S> out(A.shape());
  for (Index i = 0; i < A.numel(); ++i) out[i] = A[i] + B[i];
  const int ai = a.id, bi = b.id;
  return t.record(std::move(out), [ai, bi](Tape<S>& tp, int oid) {
    const Tensor<S>& g = tp.grad(oid);
    Tensor<S>& ga = tp.grad(ai);
    Tensor<S>& gb = tp.grad(bi);
    for (Index i = 0; i < g.numel(); ++i) {
      ga[i] += g[i];
      gb[i] += g[i];
    }
  });
}

template <typename S>
Var<S> sub(Var<S> a, Var<S> b) {
  auto& t = detail::tape_of(a);
  detail::require_same_tape(a, b);
  const auto &A = t.value(a.id), &B = t.value(b.id);
  check_same_shape(A, B, "sub");
  Tensor<S> out(A.shape());
  for (Index i = 0; i < A.numel(); ++i) out[i] = A[i] - B[i];
  const int ai = a.id, bi = b.id;
  return t.record(std::move(out), [ai, bi](Tape<S>& tp, int oid) {
    const Tensor<S>& g = tp.grad(oid);
    Tensor<S>& ga = tp.grad(ai);
    Tensor<S>& gb = tp.grad(bi);
    for (Index i = 0; i < g.numel(); ++i) {
      ga[i] += g[i];
      gb[i] -= g[i];
    }
  });
}

template <typename S>
Var<S> mul(Var<S> a, Var<S> b) {
  auto& t = detail::tape_of(a);
  detail::require_same_tape(a, b);
  const auto &A = t.value(a.id), &B = t.value(b.id);
  check_same_shape(A, B, "mul");
  Tensor<S> out(A.shape());
  for (Index i = 0; i < A.numel(); ++i) out[i] = A[i] * B[i];
  const int ai = a.id, bi = b.id;
  return t.record(std::move(out), [ai, bi](Tape<S>& tp, int oid) {
    const Tensor<S>& g = tp.grad(oid);
    const Tensor<S>& A = tp.value(ai);
    const Tensor<S>& B = tp.value(bi);
    Tensor<S>& ga = tp.grad(ai);
    Tensor<S>& gb = tp.grad(bi);
    for (Index i = 0; i < g.numel(); ++i) {
      ga[i] += g[i] * B[i];
      gb[i] += g[i] * A[i];
    }
  });
}

template <typename S>
Var<S> div(Var<S> a, Var<S> b) {
  auto& t = detail::tape_of(a);
  detail::require_same_tape(a, b);
  const auto &A = t.value(a.id), &B = t.value(b.id);
  check_same_shape(A, B, "div");
  Tensor<S> out(A.shape());
  for (Index i = 0; i < A.numel(); ++i) out[i] = A[i] / B[i];
  const int ai = a.id, bi = b.id;
  return t.record(std::move(out), [ai, bi](Tape<S>& tp, int oid) {
    const Tensor<S>& g = tp.grad(oid);
    const Tensor<S>& A = tp.value(ai);
    const Tensor<S>& B = tp.value(bi);
    Tensor<S>& ga = tp.grad(ai);
    Tensor<S>& gb = tp.grad(bi);
    for (Index i = 0; i < g.numel(); ++i) {
      ga[i] += g[i] / B[i];
      gb[i] -= g[i] * A[i] / (B[i] * B[i]);
    }
  });
}

// Elementwise minimum; ties route the gradient to the first argument.
template <typename S>
Var<S> min_elem(Var<S> a, Var<S> b) {
  auto& t = detail::tape_of(a);
  const auto &A = t.value(a.id), &B = t.value(b.id);
  check_same_shape(A, B, "min_elem");
  Tensor<S> out(A.shape());
  for (Index i = 0; i < A.numel(); ++i) out[i] = std::min(A[i], B[i]);
  const int ai = a.id, bi = b.id;
  return t.record(std::move(out), [ai, bi](Tape<S>& tp, int oid) {
    const Tensor<S>& g = tp.grad(oid);
    const Tensor<S>& A = tp.value(ai);
    const Tensor<S>& B = tp.value(bi);
    Tensor<S>& ga = tp.grad(ai);
    Tensor<S>& gb = tp.grad(bi);
    for (Index i = 0; i < g.numel(); ++i) {
      if (A[i] <= B[i]) ga[i] += g[i];
      else gb[i] += g[i];
    }
  });
}

template <typename S>
Var<S> max_elem(Var<S> a, Var<S> b) {
  auto& t = detail::tape_of(a);
  const auto &A = t.value(a.id), &B = t.value(b.id);
  check_same_shape(A, B, "max_elem");
  Tensor<S> out(A.shape());
  for (Index i = 0; i < A.numel(); ++i) out[i] = std::max(A[i], B[i]);
  const int ai = a.id, bi = b.id;
  return t.record(std::move(out), [ai, bi](Tape<S>& tp, int oid) {
    const Tensor<S>& g = tp.grad(oid);
    const Tensor<S>& A = tp.value(ai);
    const Tensor<S>& B = tp.value(bi);
    Tensor<S>& ga = tp.grad(ai);
    Tensor<S>& gb = tp.grad(bi);
    for (Index i = 0; i < g.numel(); ++i) {
      if (A[i] >= B[i]) ga[i] += g[i];
      else gb[i] += g[i];
    }
  });
}

// ---------------------------------------------------------------------------
// Elementwise unary ops.
// ---------------------------------------------------------------------------

/// y = alpha * x + beta with compile-time-constant coefficients.
template <typename S>
Var<S> affine(Var<S> x, S alpha, S beta) {
  auto& t = detail::tape_of(x);
  const auto& X = t.value(x.id);
  Tensor<S> out(X.shape());
  for (Index i = 0; i < X.numel(); ++i) out[i] = alpha * X[i] + beta;
  const int xi = x.id;
  return t.record(std::move(out), [xi, alpha](Tape<S>& tp, int oid) {
    const Tensor<S>& g = tp.grad(oid);
    Tensor<S>& gx = tp.grad(xi);
    for (Index i = 0; i < g.numel(); ++i) gx[i] += alpha * g[i];
  });
}

template <typename S>
Var<S> relu(Var<S> x) {
  auto& t = detail::tape_of(x);
  const auto& X = t.value(x.id);
  Tensor<S> out(X.shape());
  for (Index i = 0; i < X.numel(); ++i) out[i] = X[i] > S(0) ? X[i] : S(0);
  const int xi = x.id;
  return t.record(std::move(out), [xi](Tape<S>& tp, int oid) {
    const Tensor<S>& g = tp.grad(oid);
    const Tensor<S>& X = tp.value(xi);
    Tensor<S>& gx = tp.grad(xi);
    for (Index i = 0; i < g.numel(); ++i)
      if (X[i] > S(0)) gx[i] += g[i];
  });
}

template <typename S>
Var<S> sigmoid(Var<S> x) {
  auto& t = detail::tape_of(x);
  const auto& X = t.value(x.id);
  Tensor<S> out(X.shape());
  for (Index i = 0; i < X.numel(); ++i) out[i] = S(1) / (S(1) + std::exp(-X[i]));
  Tensor<S> y = out;
  const int xi = x.id;
  return t.record(std::move(out), [xi, y = std::move(y)](Tape<S>& tp, int oid) {
    const Tensor<S>& g = tp.grad(oid);
    Tensor<S>& gx = tp.grad(xi);
    for (Index i = 0; i < g.numel(); ++i) gx[i] += g[i] * y[i] * (S(1) - y[i]);
  });
}

/// Exact Gaussian-CDF GELU: x * Phi(x).
template <typename S>
Var<S> gelu(Var<S> x) {
  auto& t = detail::tape_of(x);
  const auto& X = t.value(x.id);
  Tensor<S> out(X.shape());
  const S inv_sqrt2 = S(1) / std::sqrt(S(2));
  for (Index i = 0; i < X.numel(); ++i)
    out[i] = S(0.5) * X[i] * (S(1) + std::erf(X[i] * inv_sqrt2));
  const int xi = x.id;
  return t.record(std::move(out), [xi, inv_sqrt2](Tape<S>& tp, int oid) {
    const Tensor<S>& g = tp.grad(oid);
    const Tensor<S>& X = tp.value(xi);
    Tensor<S>& gx = tp.grad(xi);
    const S inv_sqrt2pi = S(1) / std::sqrt(S(2) * S(M_PI));
    for (Index i = 0; i < g.numel(); ++i) {
      const S cdf = S(0.5) * (S(1) + std::erf(X[i] * inv_sqrt2));
      const S pdf = inv_sqrt2pi * std::exp(S(-0.5) * X[i] * X[i]);
      gx[i] += g[i] * (cdf + X[i] * pdf);
    }
  });
}

template <typename S>
Var<S> exp_op(Var<S> x) {
  auto& t = detail::tape_of(x);
  const auto& X = t.value(x.id);
  Tensor<S> out(X.shape());
  for (Index i = 0; i < X.numel(); ++i) out[i] = std::exp(X[i]);
  Tensor<S> y = out;
  const int xi = x.id;
  return t.record(std::move(out), [xi, y = std::move(y)](Tape<S>& tp, int oid) {
    const Tensor<S>& g = tp.grad(oid);
    Tensor<S>& gx = tp.grad(xi);
    for (Index i = 0; i < g.numel(); ++i) gx[i] += g[i] * y[i];
  });
}

template <typename S>
Var<S> log_op(Var<S> x) {
  auto& t = detail::tape_of(x);
  const auto& X = t.value(x.id);
  Tensor<S> out(X.shape());
  for (Index i = 0; i < X.numel(); ++i) out[i] = std::log(X[i]);
  const int xi = x.id;
  return t.record(std::move(out), [xi](Tape<S>& tp, int oid) {
    const Tensor<S>& g = tp.grad(oid);
    const Tensor<S>& X = tp.value(xi);
    Tensor<S>& gx = tp.grad(xi);
    for (Index i = 0; i < g.numel(); ++i) gx[i] += g[i] / X[i];
  });
}

template <typename S>
Var<S> abs_op(Var<S> x) {
  auto& t = detail::tape_of(x);
  const auto& X = t.value(x.id);
  Tensor<S> out(X.shape());
  for (Index i = 0; i < X.numel(); ++i) out[i] = std::abs(X[i]);
  const int xi = x.id;
  return t.record(std::move(out), [xi](Tape<S>& tp, int oid) {
    const Tensor<S>& g = tp.grad(oid);
    const Tensor<S>& X = tp.value(xi);
    Tensor<S>& gx = tp.grad(xi);
    for (Index i = 0; i < g.numel(); ++i) {
      if (X[i] > S(0)) gx[i] += g[i];
      else if (X[i] < S(0)) gx[i] -= g[i];
    }
  });
}

/// Clamp to [lo, hi]; gradient passes only where the input lies inside.
template <typename S>
Var<S> clamp(Var<S> x, S lo, S hi) {
  auto& t = detail::tape_of(x);
  const auto& X = t.value(x.id);
  Tensor<S> out(X.shape());
  for (Index i = 0; i < X.numel(); ++i) out[i] = std::min(std::max(X[i], lo), hi);
  const int xi = x.id;
  return t.record(std::move(out), [xi, lo, hi](Tape<S>& tp, int oid) {
    const Tensor<S>& g = tp.grad(oid);
    const Tensor<S>& X = tp.value(xi);
    Tensor<S>& gx = tp.grad(xi);
    for (Index i = 0; i < g.numel(); ++i)
      if (X[i] >= lo && X[i] <= hi) gx[i] += g[i];
  });
}

/// Stop-gradient: copies the value onto a fresh leaf.
template <typename S>
Var<S> detach(Var<S> x) {
  auto& t = detail::tape_of(x);
  return t.leaf(t.value(x.id));
}

// ---------------------------------------------------------------------------
// Broadcasts over token rows.
// ---------------------------------------------------------------------------

/// x[N x C] + v broadcast over rows; v has C elements ([C] or [1 x C]).
template <typename S>
Var<S> add_rowvec(Var<S> x, Var<S> v) {
  auto& t = detail::tape_of(x);
  const auto &X = t.value(x.id), &V = t.value(v.id);
  if (X.rank() != 2 || V.numel() != X.extent(1))
    throw ShapeError("add_rowvec: shape mismatch " + shape_str(X.shape()) + " vs " +
                     shape_str(V.shape()));
  const Index n = X.extent(0), c = X.extent(1);
  Tensor<S> out(X.shape());
  for (Index r = 0; r < n; ++r)
    for (Index j = 0; j < c; ++j) out.at2(r, j) = X.at2(r, j) + V[j];
  const int xi = x.id, vi = v.id;
  return t.record(std::move(out), [xi, vi, n, c](Tape<S>& tp, int oid) {
    const Tensor<S>& g = tp.grad(oid);
    Tensor<S>& gx = tp.grad(xi);
    Tensor<S>& gv = tp.grad(vi);
    for (Index r = 0; r < n; ++r)
      for (Index j = 0; j < c; ++j) {
        gx.at2(r, j) += g.at2(r, j);
        gv[j] += g.at2(r, j);
      }
  });
}

/// x[N x C] * s broadcast over rows (per-channel gate).
template <typename S>
Var<S> rowscale(Var<S> x, Var<S> s) {
  auto& t = detail::tape_of(x);
  const auto &X = t.value(x.id), &G = t.value(s.id);
  if (X.rank() != 2 || G.numel() != X.extent(1))
    throw ShapeError("rowscale: shape mismatch " + shape_str(X.shape()) + " vs " +
                     shape_str(G.shape()));
  const Index n = X.extent(0), c = X.extent(1);
  Tensor<S> out(X.shape());
  for (Index r = 0; r < n; ++r)
    for (Index j = 0; j < c; ++j) out.at2(r, j) = X.at2(r, j) * G[j];
  const int xi = x.id, si = s.id;
  return t.record(std::move(out), [xi, si, n, c](Tape<S>& tp, int oid) {
    const Tensor<S>& g = tp.grad(oid);
    const Tensor<S>& X = tp.value(xi);
    const Tensor<S>& G = tp.value(si);
    Tensor<S>& gx = tp.grad(xi);
    Tensor<S>& gs = tp.grad(si);
    for (Index r = 0; r < n; ++r)
      for (Index j = 0; j < c; ++j) {
        gx.at2(r, j) += g.at2(r, j) * G[j];
        gs[j] += g.at2(r, j) * X.at2(r, j);
      }
  });
}

// ---------------------------------------------------------------------------
// Reductions and selection.
// ---------------------------------------------------------------------------

template <typename S>
Var<S> sum(Var<S> x) {
  auto& t = detail::tape_of(x);
  const auto& X = t.value(x.id);
  S acc = S(0);
  for (Index i = 0; i < X.numel(); ++i) acc += X[i];
  const int xi = x.id;
  return t.record(Tensor<S>::scalar(acc), [xi](Tape<S>& tp, int oid) {
    const S g = tp.grad(oid)[0];
    Tensor<S>& gx = tp.grad(xi);
    for (Index i = 0; i < gx.numel(); ++i) gx[i] += g;
  });
}

template <typename S>
Var<S> mean(Var<S> x) {
  const Index n = detail::tape_of(x).value(x.id).numel();
  return affine(sum(x), S(1) / S(n), S(0));
}

/// Per-channel mean over tokens: [N x C] -> [C]. This is the adaptive
/// average pooling of the SE path.
template <typename S>
Var<S> col_mean(Var<S> x) {
  auto& t = detail::tape_of(x);
  const auto& X = t.value(x.id);
  if (X.rank() != 2) throw ShapeError("col_mean expects rank 2, got " + shape_str(X.shape()));
  const Index n = X.extent(0), c = X.extent(1);
  Tensor<S> out({c});
  for (Index r = 0; r < n; ++r)
    for (Index j = 0; j < c; ++j) out[j] += X.at2(r, j);
  for (Index j = 0; j < c; ++j) out[j] /= S(n);
  const int xi = x.id;
  return t.record(std::move(out), [xi, n, c](Tape<S>& tp, int oid) {
    const Tensor<S>& g = tp.grad(oid);
    Tensor<S>& gx = tp.grad(xi);
    for (Index r = 0; r < n; ++r)
      for (Index j = 0; j < c; ++j) gx.at2(r, j) += g[j] / S(n);
  });
}

/// Picks a single element by flat index -> scalar node.
template <typename S>
Var<S> select(Var<S> x, Index flat) {
  auto& t = detail::tape_of(x);
  const auto& X = t.value(x.id);
  if (flat < 0 || flat >= X.numel())
    throw ContractError("select: index " + std::to_string(flat) + " out of range");
  const int xi = x.id;
  return t.record(Tensor<S>::scalar(X[flat]), [xi, flat](Tape<S>& tp, int oid) {
    tp.grad(xi)[flat] += tp.grad(oid)[0];
  });
}

// ---------------------------------------------------------------------------
// Layout ops (pure data movement).
// ---------------------------------------------------------------------------

template <typename S>
Var<S> reshape(Var<S> x, Shape shape) {
  auto& t = detail::tape_of(x);
  Tensor<S> out = t.value(x.id).reshaped(shape);
  const int xi = x.id;
  return t.record(std::move(out), [xi](Tape<S>& tp, int oid) {
    const Tensor<S>& g = tp.grad(oid);
    Tensor<S>& gx = tp.grad(xi);
    for (Index i = 0; i < g.numel(); ++i) gx[i] += g[i];
  });
}

template <typename S>
Var<S> transpose(Var<S> x) {
  auto& t = detail::tape_of(x);
  const auto& X = t.value(x.id);
  if (X.rank() != 2) throw ShapeError("transpose expects rank 2, got " + shape_str(X.shape()));
  const Index m = X.extent(0), n = X.extent(1);
  Tensor<S> out({n, m});
  for (Index i = 0; i < m; ++i)
    for (Index j = 0; j < n; ++j) out.at2(j, i) = X.at2(i, j);
  const int xi = x.id;
  return t.record(std::move(out), [xi, m, n](Tape<S>& tp, int oid) {
    const Tensor<S>& g = tp.grad(oid);
    Tensor<S>& gx = tp.grad(xi);
    for (Index i = 0; i < m; ++i)
      for (Index j = 0; j < n; ++j) gx.at2(i, j) += g.at2(j, i);
  });
}

template <typename S>
Var<S> concat_rows(Var<S> a, Var<S> b) {
  auto& t = detail::tape_of(a);
  const auto &A = t.value(a.id), &B = t.value(b.id);
  if (A.rank() != 2 || B.rank() != 2 || A.extent(1) != B.extent(1))
    throw ShapeError("concat_rows: incompatible " + shape_str(A.shape()) + " and " +
                     shape_str(B.shape()));
  const Index na = A.extent(0), nb = B.extent(0), c = A.extent(1);
  Tensor<S> out({na + nb, c});
  std::copy(A.data(), A.data() + A.numel(), out.data());
  std::copy(B.data(), B.data() + B.numel(), out.data() + A.numel());
  const int ai = a.id, bi = b.id;
  return t.record(std::move(out), [ai, bi, na, nb, c](Tape<S>& tp, int oid) {
    const Tensor<S>& g = tp.grad(oid);
    Tensor<S>& ga = tp.grad(ai);
    Tensor<S>& gb = tp.grad(bi);
    for (Index i = 0; i < na * c; ++i) ga[i] += g[i];
    for (Index i = 0; i < nb * c; ++i) gb[i] += g[na * c + i];
  });
}

/// Rows [r0, r1) of a rank-2 tensor.
template <typename S>
Var<S> slice_rows(Var<S> x, Index r0, Index r1) {
  auto& t = detail::tape_of(x);
  const auto& X = t.value(x.id);
  if (X.rank() != 2 || r0 < 0 || r1 > X.extent(0) || r0 >= r1)
    throw ShapeError("slice_rows: bad range [" + std::to_string(r0) + ", " +
                     std::to_string(r1) + ") for " + shape_str(X.shape()));
  const Index c = X.extent(1);
  Tensor<S> out({r1 - r0, c});
  std::copy(X.data() + r0 * c, X.data() + r1 * c, out.data());
  const int xi = x.id;
  return t.record(std::move(out), [xi, r0, c](Tape<S>& tp, int oid) {
    const Tensor<S>& g = tp.grad(oid);
    Tensor<S>& gx = tp.grad(xi);
    for (Index i = 0; i < g.numel(); ++i) gx[r0 * c + i] += g[i];
  });
}

template <typename S>
Var<S> concat_cols(Var<S> a, Var<S> b) {
  auto& t = detail::tape_of(a);
  const auto &A = t.value(a.id), &B = t.value(b.id);
  if (A.rank() != 2 || B.rank() != 2 || A.extent(0) != B.extent(0))
    throw ShapeError("concat_cols: incompatible " + shape_str(A.shape()) + " and " +
                     shape_str(B.shape()));
  const Index n = A.extent(0), ca = A.extent(1), cb = B.extent(1);
  Tensor<S> out({n, ca + cb});
  for (Index r = 0; r < n; ++r) {
    std::copy(A.data() + r * ca, A.data() + (r + 1) * ca, out.data() + r * (ca + cb));
    std::copy(B.data() + r * cb, B.data() + (r + 1) * cb, out.data() + r * (ca + cb) + ca);
  }
  const int ai = a.id, bi = b.id;
  return t.record(std::move(out), [ai, bi, n, ca, cb](Tape<S>& tp, int oid) {
    const Tensor<S>& g = tp.grad(oid);
    Tensor<S>& ga = tp.grad(ai);
    Tensor<S>& gb = tp.grad(bi);
    for (Index r = 0; r < n; ++r) {
      for (Index j = 0; j < ca; ++j) ga.at2(r, j) += g.at2(r, j);
      for (Index j = 0; j < cb; ++j) gb.at2(r, j) += g.at2(r, ca + j);
    }
  });
}

/// Columns [c0, c1) of a rank-2 tensor.
template <typename S>
Var<S> slice_cols(Var<S> x, Index c0, Index c1) {
  auto& t = detail::tape_of(x);
  const auto& X = t.value(x.id);
  if (X.rank() != 2 || c0 < 0 || c1 > X.extent(1) || c0 >= c1)
    throw ShapeError("slice_cols: bad range [" + std::to_string(c0) + ", " +
                     std::to_string(c1) + ") for " + shape_str(X.shape()));
  const Index n = X.extent(0), c = X.extent(1);
  Tensor<S> out({n, c1 - c0});
  for (Index r = 0; r < n; ++r)
    std::copy(X.data() + r * c + c0, X.data() + r * c + c1, out.data() + r * (c1 - c0));
  const int xi = x.id;
  return t.record(std::move(out), [xi, c0, c1, c](Tape<S>& tp, int oid) {
    const Tensor<S>& g = tp.grad(oid);
    Tensor<S>& gx = tp.grad(xi);
    const Index w = c1 - c0;
    for (Index r = 0; r < g.extent(0); ++r)
      for (Index j = 0; j < w; ++j) gx[r * c + c0 + j] += g.at2(r, j);
  });
}

/// Tokens [N x C] with row-major grid (rows, cols) -> image [C x rows x cols].
template <typename S>
Var<S> tokens_to_image(Var<S> x, Index rows, Index cols) {
  auto& t = detail::tape_of(x);
  const auto& X = t.value(x.id);
  if (X.rank() != 2 || X.extent(0) != rows * cols)
    throw ShapeError("tokens_to_image: grid " + std::to_string(rows) + "x" +
                     std::to_string(cols) + " does not match " + shape_str(X.shape()));
  const Index n = X.extent(0), c = X.extent(1);
  Tensor<S> out({c, rows, cols});
  for (Index r = 0; r < n; ++r)
    for (Index j = 0; j < c; ++j) out[j * n + r] = X.at2(r, j);
  const int xi = x.id;
  return t.record(std::move(out), [xi, n, c](Tape<S>& tp, int oid) {
    const Tensor<S>& g = tp.grad(oid);
    Tensor<S>& gx = tp.grad(xi);
    for (Index r = 0; r < n; ++r)
      for (Index j = 0; j < c; ++j) gx.at2(r, j) += g[j * n + r];
  });
}

/// Image [C x rows x cols] -> tokens [N x C], row-major over the grid.
template <typename S>
Var<S> image_to_tokens(Var<S> x) {
  auto& t = detail::tape_of(x);
  const auto& X = t.value(x.id);
  if (X.rank() != 3) throw ShapeError("image_to_tokens expects rank 3, got " + shape_str(X.shape()));
  const Index c = X.extent(0), n = X.extent(1) * X.extent(2);
  Tensor<S> out({n, c});
  for (Index j = 0; j < c; ++j)
    for (Index r = 0; r < n; ++r) out.at2(r, j) = X[j * n + r];
  const int xi = x.id;
  return t.record(std::move(out), [xi, n, c](Tape<S>& tp, int oid) {
    const Tensor<S>& g = tp.grad(oid);
    Tensor<S>& gx = tp.grad(xi);
    for (Index j = 0; j < c; ++j)
      for (Index r = 0; r < n; ++r) gx[j * n + r] += g.at2(r, j);
  });
}

/// Image [C x H x W] -> patch rows [(H/p * W/p) x (C p^2)], row-major over the
/// patch grid; within a row, layout is (channel, py, px).
template <typename S>
Var<S> patchify(Var<S> x, Index p) {
  auto& t = detail::tape_of(x);
  const auto& X = t.value(x.id);
  if (X.rank() != 3) throw ShapeError("patchify expects rank 3, got " + shape_str(X.shape()));
  const Index c = X.extent(0), h = X.extent(1), w = X.extent(2);
  if (h % p != 0 || w % p != 0)
    throw ConfigError("patchify: extents " + shape_str(X.shape()) +
                      " not divisible by stride " + std::to_string(p));
  const Index gh = h / p, gw = w / p, d = c * p * p;
  Tensor<S> out({gh * gw, d});
  for (Index gy = 0; gy < gh; ++gy)
    for (Index gx_ = 0; gx_ < gw; ++gx_) {
      S* row = out.data() + (gy * gw + gx_) * d;
      for (Index ch = 0; ch < c; ++ch)
        for (Index py = 0; py < p; ++py)
          for (Index px = 0; px < p; ++px)
            row[(ch * p + py) * p + px] = X.at3(ch, gy * p + py, gx_ * p + px);
    }
  const int xi = x.id;
  return t.record(std::move(out), [xi, c, p, gh, gw, d](Tape<S>& tp, int oid) {
    const Tensor<S>& g = tp.grad(oid);
    Tensor<S>& gx = tp.grad(xi);
    for (Index gy = 0; gy < gh; ++gy)
      for (Index gx_ = 0; gx_ < gw; ++gx_) {
        const S* row = g.data() + (gy * gw + gx_) * d;
        for (Index ch = 0; ch < c; ++ch)
          for (Index py = 0; py < p; ++py)
            for (Index px = 0; px < p; ++px)
              gx.at3(ch, gy * p + py, gx_ * p + px) += row[(ch * p + py) * p + px];
      }
  });
}

// ---------------------------------------------------------------------------
// Matrix products.
// ---------------------------------------------------------------------------

template <typename S>
Var<S> matmul(Var<S> a, Var<S> b) {
  auto& t = detail::tape_of(a);
  detail::require_same_tape(a, b);
  const auto &A = t.value(a.id), &B = t.value(b.id);
  if (A.rank() != 2 || B.rank() != 2 || A.extent(1) != B.extent(0))
    throw ShapeError("matmul: incompatible shapes " + shape_str(A.shape()) + " and " +
                     shape_str(B.shape()));
  const Index m = A.extent(0), k = A.extent(1), n = B.extent(1);
  Tensor<S> out({m, n});
  kernels::matmul(A.data(), B.data(), out.data(), m, k, n);
  const int ai = a.id, bi = b.id;
  return t.record(std::move(out), [ai, bi, m, k, n](Tape<S>& tp, int oid) {
    const Tensor<S>& g = tp.grad(oid);
    const Tensor<S>& A = tp.value(ai);
    const Tensor<S>& B = tp.value(bi);
    kernels::matmul_nt_acc(g.data(), B.data(), tp.grad(ai).data(), m, n, k);
    kernels::matmul_tn_acc(A.data(), g.data(), tp.grad(bi).data(), k, m, n);
  });
}

/// a[M x K] * b[N x K]^T without materializing the transpose.
template <typename S>
Var<S> matmul_nt(Var<S> a, Var<S> b) {
  auto& t = detail::tape_of(a);
  detail::require_same_tape(a, b);
  const auto &A = t.value(a.id), &B = t.value(b.id);
  if (A.rank() != 2 || B.rank() != 2 || A.extent(1) != B.extent(1))
    throw ShapeError("matmul_nt: incompatible shapes " + shape_str(A.shape()) + " and " +
                     shape_str(B.shape()));
  const Index m = A.extent(0), k = A.extent(1), n = B.extent(0);
  Tensor<S> out({m, n});
  kernels::matmul_nt(A.data(), B.data(), out.data(), m, k, n);
  const int ai = a.id, bi = b.id;
  return t.record(std::move(out), [ai, bi, m, k, n](Tape<S>& tp, int oid) {
    const Tensor<S>& g = tp.grad(oid);
    const Tensor<S>& A = tp.value(ai);
    const Tensor<S>& B = tp.value(bi);
    kernels::matmul_acc(g.data(), B.data(), tp.grad(ai).data(), m, n, k);
    kernels::matmul_tn_acc(g.data(), A.data(), tp.grad(bi).data(), n, m, k);
  });
}

// ---------------------------------------------------------------------------
// Fused neural-net ops.
// ---------------------------------------------------------------------------

/// Row-wise softmax with max subtraction. Inputs must be finite.
template <typename S>
Var<S> softmax_rows(Var<S> x) {
  auto& t = detail::tape_of(x);
  const auto& X = t.value(x.id);
  if (X.rank() != 2) throw ShapeError("softmax_rows expects rank 2, got " + shape_str(X.shape()));
  if (!X.all_finite()) throw NumericError("softmax_rows: non-finite input");
  const Index rows = X.extent(0), n = X.extent(1);
  Tensor<S> out(X.shape());
  kernels::softmax_rows(X.data(), out.data(), rows, n);
  Tensor<S> y = out;
  const int xi = x.id;
  return t.record(std::move(out), [xi, rows, n, y = std::move(y)](Tape<S>& tp, int oid) {
    const Tensor<S>& g = tp.grad(oid);
    Tensor<S>& gx = tp.grad(xi);
    for (Index r = 0; r < rows; ++r) {
      S dot = S(0);
      for (Index j = 0; j < n; ++j) dot += g.at2(r, j) * y.at2(r, j);
      for (Index j = 0; j < n; ++j) gx.at2(r, j) += y.at2(r, j) * (g.at2(r, j) - dot);
    }
  });
}

/// Per-token layer norm with affine: y = gamma * (x - mu) / sqrt(var + eps) + beta.
template <typename S>
Var<S> layer_norm(Var<S> x, Var<S> gamma, Var<S> beta, S eps) {
  auto& t = detail::tape_of(x);
  const auto& X = t.value(x.id);
  const auto& G = t.value(gamma.id);
  const auto& B = t.value(beta.id);
  if (X.rank() != 2 || G.numel() != X.extent(1) || B.numel() != X.extent(1))
    throw ShapeError("layer_norm: shape mismatch " + shape_str(X.shape()) + " vs gamma " +
                     shape_str(G.shape()));
  const Index n = X.extent(0), c = X.extent(1);
  Tensor<S> out(X.shape());
  Tensor<S> xhat(X.shape());
  Tensor<S> inv_std({n});
  for (Index r = 0; r < n; ++r) {
    S mu = S(0);
    for (Index j = 0; j < c; ++j) mu += X.at2(r, j);
    mu /= S(c);
    S var = S(0);
    for (Index j = 0; j < c; ++j) {
      const S d = X.at2(r, j) - mu;
      var += d * d;
    }
    var /= S(c);
    const S s = S(1) / std::sqrt(var + eps);
    inv_std[r] = s;
    for (Index j = 0; j < c; ++j) {
      xhat.at2(r, j) = (X.at2(r, j) - mu) * s;
      out.at2(r, j) = G[j] * xhat.at2(r, j) + B[j];
    }
  }
  const int xi = x.id, gi = gamma.id, bi = beta.id;
  return t.record(std::move(out), [xi, gi, bi, n, c, xhat = std::move(xhat),
                                   inv_std = std::move(inv_std)](Tape<S>& tp, int oid) {
    const Tensor<S>& g = tp.grad(oid);
    const Tensor<S>& G = tp.value(gi);
    Tensor<S>& gx = tp.grad(xi);
    Tensor<S>& gg = tp.grad(gi);
    Tensor<S>& gb = tp.grad(bi);
    for (Index r = 0; r < n; ++r) {
      S m1 = S(0), m2 = S(0);
      for (Index j = 0; j < c; ++j) {
        const S h = g.at2(r, j) * G[j];
        m1 += h;
        m2 += h * xhat.at2(r, j);
        gg[j] += g.at2(r, j) * xhat.at2(r, j);
        gb[j] += g.at2(r, j);
      }
      m1 /= S(c);
      m2 /= S(c);
      for (Index j = 0; j < c; ++j) {
        const S h = g.at2(r, j) * G[j];
        gx.at2(r, j) += inv_std[r] * (h - m1 - xhat.at2(r, j) * m2);
      }
    }
  });
}

/// Batch norm over the token axis of [N x C]. In training mode batch
/// statistics are used and the running buffers are updated in place; in eval
/// mode the op is the per-channel affine map through the running statistics.
template <typename S>
Var<S> batch_norm(Var<S> x, Var<S> gamma, Var<S> beta, Parameter<S>& run_mean,
                  Parameter<S>& run_var, S eps, S momentum, bool training) {
  auto& t = detail::tape_of(x);
  const auto& X = t.value(x.id);
  const auto& G = t.value(gamma.id);
  if (X.rank() != 2 || G.numel() != X.extent(1))
    throw ShapeError("batch_norm: shape mismatch " + shape_str(X.shape()) + " vs gamma " +
                     shape_str(G.shape()));
  const Index n = X.extent(0), c = X.extent(1);
  const auto& B = t.value(beta.id);

  Tensor<S> mu({c}), var({c});
  if (training) {
    for (Index j = 0; j < c; ++j) {
      S m = S(0);
      for (Index r = 0; r < n; ++r) m += X.at2(r, j);
      m /= S(n);
      S v = S(0);
      for (Index r = 0; r < n; ++r) {
        const S d = X.at2(r, j) - m;
        v += d * d;
      }
      v /= S(n);
      mu[j] = m;
      var[j] = v;
      const S unbiased = n > 1 ? v * S(n) / S(n - 1) : v;
      run_mean.value[j] = (S(1) - momentum) * run_mean.value[j] + momentum * m;
      run_var.value[j] = (S(1) - momentum) * run_var.value[j] + momentum * unbiased;
    }
  } else {
    mu = run_mean.value;
    var = run_var.value;
  }

  Tensor<S> out(X.shape());
  Tensor<S> xhat(X.shape());
  Tensor<S> inv_std({c});
  for (Index j = 0; j < c; ++j) inv_std[j] = S(1) / std::sqrt(var[j] + eps);
  for (Index r = 0; r < n; ++r)
    for (Index j = 0; j < c; ++j) {
      xhat.at2(r, j) = (X.at2(r, j) - mu[j]) * inv_std[j];
      out.at2(r, j) = G[j] * xhat.at2(r, j) + B[j];
    }

  const int xi = x.id, gi = gamma.id, bi = beta.id;
  return t.record(std::move(out), [xi, gi, bi, n, c, training, xhat = std::move(xhat),
                                   inv_std = std::move(inv_std)](Tape<S>& tp, int oid) {
    const Tensor<S>& g = tp.grad(oid);
    const Tensor<S>& G = tp.value(gi);
    Tensor<S>& gx = tp.grad(xi);
    Tensor<S>& gg = tp.grad(gi);
    Tensor<S>& gb = tp.grad(bi);
    for (Index j = 0; j < c; ++j) {
      S sum_g = S(0), sum_gx = S(0);
      for (Index r = 0; r < n; ++r) {
        sum_g += g.at2(r, j);
        sum_gx += g.at2(r, j) * xhat.at2(r, j);
      }
      gg[j] += sum_gx;
      gb[j] += sum_g;
      if (training) {
        const S m1 = sum_g * G[j] / S(n);
        const S m2 = sum_gx * G[j] / S(n);
        for (Index r = 0; r < n; ++r)
          gx.at2(r, j) +=
              inv_std[j] * (g.at2(r, j) * G[j] - m1 - xhat.at2(r, j) * m2);
      } else {
        for (Index r = 0; r < n; ++r) gx.at2(r, j) += g.at2(r, j) * G[j] * inv_std[j];
      }
    }
  });
}

namespace detail {

/// 2-D cross-correlation with "same" zero padding for odd kernels.
/// x: [C_in x H x W], w: [C_out x C_in/groups x k x k], optional bias [C_out].
template <typename S>
Var<S> conv2d_impl(Var<S> x, Var<S> w, std::optional<Var<S>> bias, Index groups) {
  auto& t = detail::tape_of(x);
  const auto& X = t.value(x.id);
  const auto& W = t.value(w.id);
  if (X.rank() != 3 || W.rank() != 4)
    throw ShapeError("conv2d: expected rank-3 input and rank-4 weights, got " +
                     shape_str(X.shape()) + " and " + shape_str(W.shape()));
  const Index c_in = X.extent(0), h = X.extent(1), wd = X.extent(2);
  const Index c_out = W.extent(0), k = W.extent(2);
  if (W.extent(2) != W.extent(3)) throw ConfigError("conv2d: non-square kernel unsupported");
  if (k % 2 == 0) throw ConfigError("conv2d: even kernel size " + std::to_string(k) + " unsupported");
  if (groups < 1 || c_in % groups != 0 || c_out % groups != 0 || W.extent(1) != c_in / groups)
    throw ShapeError("conv2d: channel/group mismatch: input " + shape_str(X.shape()) +
                     ", weights " + shape_str(W.shape()) + ", groups " + std::to_string(groups));
  kernels::Conv2dSpec spec{c_in, h, wd, c_out, k, groups, (k - 1) / 2};
  Tensor<S> out({c_out, h, wd});
  const S* bptr = nullptr;
  int bias_id = -1;
  if (bias) {
    const auto& Bv = t.value(bias->id);
    if (Bv.numel() != c_out)
      throw ShapeError("conv2d: bias shape " + shape_str(Bv.shape()) + " vs c_out " +
                       std::to_string(c_out));
    bptr = Bv.data();
    bias_id = bias->id;
  }
  kernels::conv2d(X.data(), W.data(), bptr, out.data(), spec);
  const int xi = x.id, wi = w.id;
  return t.record(std::move(out), [xi, wi, bias_id, spec](Tape<S>& tp, int oid) {
    const Tensor<S>& g = tp.grad(oid);
    const Tensor<S>& X = tp.value(xi);
    const Tensor<S>& W = tp.value(wi);
    S* gb = bias_id >= 0 ? tp.grad(bias_id).data() : nullptr;
    kernels::conv2d_backward(X.data(), W.data(), g.data(), tp.grad(xi).data(),
                             tp.grad(wi).data(), gb, spec);
  });
}

}  // namespace detail

template <typename S>
Var<S> conv2d(Var<S> x, Var<S> w, Index groups) {
  return detail::conv2d_impl(x, w, std::optional<Var<S>>(), groups);
}

template <typename S>
Var<S> conv2d(Var<S> x, Var<S> w, Var<S> bias, Index groups) {
  return detail::conv2d_impl(x, w, std::optional<Var<S>>(bias), groups);
}

}  // namespace cstnet::ops
