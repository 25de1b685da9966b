// Copyright 2026 The cstnet Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Dense>
#include <cstdint>

#include "cstnet/tensor.hpp"

namespace cstnet::kernels {

/// Running count of multiply-accumulate operations issued by the matmul and
/// convolution kernels. Cost accounting tests compare this tally against the
/// analytic per-layer formulas.
inline thread_local std::uint64_t mac_tally = 0;

template <typename S>
using EigenMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename S>
using MapMat = Eigen::Map<EigenMat<S>>;
template <typename S>
using MapConstMat = Eigen::Map<const EigenMat<S>>;

// out[m x n] = a[m x k] * b[k x n]
template <typename S>
void matmul(const S* a, const S* b, S* out, Index m, Index k, Index n) {
  MapConstMat<S> A(a, m, k), B(b, k, n);
  MapMat<S> O(out, m, n);
  O.noalias() = A * B;
  mac_tally += std::uint64_t(m) * std::uint64_t(k) * std::uint64_t(n);
}

// out[m x n] = a[m x k] * b[n x k]^T
template <typename S>
void matmul_nt(const S* a, const S* b, S* out, Index m, Index k, Index n) {
  MapConstMat<S> A(a, m, k), B(b, n, k);
  MapMat<S> O(out, m, n);
  O.noalias() = A * B.transpose();
  mac_tally += std::uint64_t(m) * std::uint64_t(k) * std::uint64_t(n);
}

// out[m x n] += a[k x m]^T * b[k x n]
template <typename S>
void matmul_tn_acc(const S* a, const S* b, S* out, Index m, Index k, Index n) {
  MapConstMat<S> A(a, k, m), B(b, k, n);
  MapMat<S> O(out, m, n);
  O.noalias() += A.transpose() * B;
}

// out[m x n] += a[m x k] * b[k x n]
template <typename S>
void matmul_acc(const S* a, const S* b, S* out, Index m, Index k, Index n) {
  MapConstMat<S> A(a, m, k), B(b, k, n);
  MapMat<S> O(out, m, n);
  O.noalias() += A * B;
}

// out[m x n] += a[m x k] * b[n x k]^T
template <typename S>
void matmul_nt_acc(const S* a, const S* b, S* out, Index m, Index k, Index n) {
  MapConstMat<S> A(a, m, k), B(b, n, k);
  MapMat<S> O(out, m, n);
  O.noalias() += A * B.transpose();
}

struct Conv2dSpec {
  Index c_in = 0, h = 0, w = 0;
  Index c_out = 0, k = 0;
  Index groups = 1;
  Index pad = 0;  // symmetric zero padding; "same" output for odd k with pad=(k-1)/2
};

inline std::uint64_t conv2d_macs(const Conv2dSpec& s) {
  return std::uint64_t(s.c_out) * std::uint64_t(s.h) * std::uint64_t(s.w) *
         std::uint64_t(s.c_in / s.groups) * std::uint64_t(s.k) * std::uint64_t(s.k);
}

/// Direct cross-correlation. x: [c_in x h x w], wt: [c_out x c_in/g x k x k],
/// bias: [c_out] or null, out: [c_out x h x w] (same padding assumed by caller).
template <typename S>
void conv2d(const S* x, const S* wt, const S* bias, S* out, const Conv2dSpec& s) {
  const Index cg_in = s.c_in / s.groups;
  const Index cg_out = s.c_out / s.groups;
  for (Index oc = 0; oc < s.c_out; ++oc) {
    const Index g = oc / cg_out;
    const S b = bias ? bias[oc] : S(0);
    for (Index oy = 0; oy < s.h; ++oy) {
      for (Index ox = 0; ox < s.w; ++ox) {
        S acc = b;
        for (Index ic = 0; ic < cg_in; ++ic) {
          const S* xin = x + (g * cg_in + ic) * s.h * s.w;
          const S* wrow = wt + ((oc * cg_in + ic) * s.k) * s.k;
          for (Index ky = 0; ky < s.k; ++ky) {
            const Index iy = oy + ky - s.pad;
            if (iy < 0 || iy >= s.h) continue;
            for (Index kx = 0; kx < s.k; ++kx) {
              const Index ix = ox + kx - s.pad;
              if (ix < 0 || ix >= s.w) continue;
              acc += wrow[ky * s.k + kx] * xin[iy * s.w + ix];
            }
          }
        }
        out[(oc * s.h + oy) * s.w + ox] = acc;
      }
    }
  }
  mac_tally += conv2d_macs(s);
}

/// Gradients of conv2d. Any of gx, gw, gb may be null; non-null buffers are
/// accumulated into.
template <typename S>
void conv2d_backward(const S* x, const S* wt, const S* gout, S* gx, S* gw, S* gb,
                     const Conv2dSpec& s) {
  const Index cg_in = s.c_in / s.groups;
  const Index cg_out = s.c_out / s.groups;
  for (Index oc = 0; oc < s.c_out; ++oc) {
    const Index g = oc / cg_out;
    for (Index oy = 0; oy < s.h; ++oy) {
      for (Index ox = 0; ox < s.w; ++ox) {
        const S go = gout[(oc * s.h + oy) * s.w + ox];
        if (gb) gb[oc] += go;
        for (Index ic = 0; ic < cg_in; ++ic) {
          const Index cin = g * cg_in + ic;
          const S* xin = x + cin * s.h * s.w;
          const S* wrow = wt + ((oc * cg_in + ic) * s.k) * s.k;
          S* gxin = gx ? gx + cin * s.h * s.w : nullptr;
          S* gwrow = gw ? gw + ((oc * cg_in + ic) * s.k) * s.k : nullptr;
          for (Index ky = 0; ky < s.k; ++ky) {
            const Index iy = oy + ky - s.pad;
            if (iy < 0 || iy >= s.h) continue;
            for (Index kx = 0; kx < s.k; ++kx) {
              const Index ix = ox + kx - s.pad;
              if (ix < 0 || ix >= s.w) continue;
              if (gxin) gxin[iy * s.w + ix] += wrow[ky * s.k + kx] * go;
              if (gwrow) gwrow[ky * s.k + kx] += xin[iy * s.w + ix] * go;
            }
          }
        }
      }
    }
  }
}

/// Row-wise softmax with max subtraction. x, out: [rows x n].
template <typename S>
void softmax_rows(const S* x, S* out, Index rows, Index n) {
  for (Index r = 0; r < rows; ++r) {
    const S* xr = x + r * n;
    S* yr = out + r * n;
    S m = xr[0];
    for (Index j = 1; j < n; ++j) m = std::max(m, xr[j]);
    S denom = S(0);
    for (Index j = 0; j < n; ++j) {
      yr[j] = std::exp(xr[j] - m);
      denom += yr[j];
    }
    for (Index j = 0; j < n; ++j) yr[j] /= denom;
  }
}

}  // namespace cstnet::kernels
