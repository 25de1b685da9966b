// Copyright 2026 The cstnet Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "cstnet/error.hpp"

namespace cstnet {

using Index = std::int64_t;
using Shape = std::vector<Index>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ')';
  return os.str();
}

inline Index shape_numel(const Shape& s) {
  Index n = 1;
  for (Index e : s) n *= e;
  return n;
}

/// Dense row-major n-dimensional array of reals.
///
/// The scalar type is a template parameter: `float` is the deployment
/// precision, `double` is the shadow precision used by gradient checking.
/// Rank is at least 1 and every extent is at least 1; the flat storage
/// length always equals the product of the extents.
template <typename S>
class Tensor {
 public:
  using Scalar = S;

  Tensor() : shape_{1}, data_(1, S(0)) {}

  explicit Tensor(Shape shape) : shape_(std::move(shape)) {
    validate_shape(shape_);
    data_.assign(static_cast<std::size_t>(shape_numel(shape_)), S(0));
  }

  Tensor(Shape shape, std::vector<S> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    validate_shape(shape_);
    if (shape_numel(shape_) != static_cast<Index>(data_.size()))
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_str(shape_));
  }

  static Tensor full(Shape shape, S v) {
    Tensor t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), v);
    return t;
  }

  static Tensor scalar(S v) { return Tensor({1}, {v}); }

  const Shape& shape() const { return shape_; }
  Index rank() const { return static_cast<Index>(shape_.size()); }
  Index extent(Index axis) const { return shape_[static_cast<std::size_t>(axis)]; }
  Index numel() const { return static_cast<Index>(data_.size()); }

  S* data() { return data_.data(); }
  const S* data() const { return data_.data(); }
  std::vector<S>& vec() { return data_; }
  const std::vector<S>& vec() const { return data_; }

  S& operator[](Index i) { return data_[static_cast<std::size_t>(i)]; }
  S operator[](Index i) const { return data_[static_cast<std::size_t>(i)]; }

  // Rank-specific accessors; bounds are the caller's responsibility.
  S& at2(Index i, Index j) { return data_[std::size_t(i * shape_[1] + j)]; }
  S at2(Index i, Index j) const { return data_[std::size_t(i * shape_[1] + j)]; }
  S& at3(Index c, Index y, Index x) {
    return data_[std::size_t((c * shape_[1] + y) * shape_[2] + x)];
  }
  S at3(Index c, Index y, Index x) const {
    return data_[std::size_t((c * shape_[1] + y) * shape_[2] + x)];
  }
  S& at4(Index o, Index i, Index y, Index x) {
    return data_[std::size_t(((o * shape_[1] + i) * shape_[2] + y) * shape_[3] + x)];
  }
  S at4(Index o, Index i, Index y, Index x) const {
    return data_[std::size_t(((o * shape_[1] + i) * shape_[2] + y) * shape_[3] + x)];
  }

  /// Same storage reinterpreted under a new shape with equal element count.
  Tensor reshaped(Shape s) const {
    if (shape_numel(s) != numel())
      throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(s));
    return Tensor(std::move(s), data_);
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  void fill(S v) { std::fill(data_.begin(), data_.end(), v); }

  bool all_finite() const {
    for (S v : data_)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  template <typename T>
  Tensor<T> cast() const {
    std::vector<T> d(data_.size());
    for (std::size_t i = 0; i < data_.size(); ++i) d[i] = static_cast<T>(data_[i]);
    return Tensor<T>(shape_, std::move(d));
  }

 private:
  static void validate_shape(const Shape& s) {
    if (s.empty()) throw ShapeError("tensor rank must be >= 1");
    for (Index e : s)
      if (e < 1) throw ShapeError("tensor extents must be >= 1, got " + shape_str(s));
  }

  Shape shape_;
  std::vector<S> data_;
};

template <typename S>
void check_same_shape(const Tensor<S>& a, const Tensor<S>& b, const char* what) {
  if (!a.same_shape(b))
    throw ShapeError(std::string(what) + ": shape mismatch " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
}

}  // namespace cstnet
