// Copyright 2026 The cstnet Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "cstnet/tape.hpp"

namespace cstnet {

/// Spatial grid behind a token matrix; rows*cols equals the token count.
struct Grid {
  Index rows = 0;
  Index cols = 0;
  Index count() const { return rows * cols; }
  bool operator==(const Grid&) const = default;
};

enum class Region { Template, Search, Joint };
enum class Stream { Rgb, Tir, Mixed };

/// A token matrix on a tape together with its grid and provenance tags.
template <typename S>
struct Tokens {
  Var<S> v;
  Grid grid;
  Region region = Region::Search;
  Stream stream = Stream::Rgb;

  Index count() const { return v.shape()[0]; }
  Index channels() const { return v.shape()[1]; }

  Tokens with(Var<S> nv) const { return Tokens{nv, grid, region, stream}; }
};

template <typename S>
void check_aligned(const Tokens<S>& a, const Tokens<S>& b, const char* what) {
  if (a.region != b.region)
    throw ContractError(std::string(what) + ": region mismatch between inputs");
  if (!(a.grid == b.grid) || a.v.shape() != b.v.shape())
    throw ContractError(std::string(what) + ": misaligned token matrices " +
                        shape_str(a.v.shape()) + " vs " + shape_str(b.v.shape()));
}

}  // namespace cstnet
