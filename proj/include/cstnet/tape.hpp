// Copyright 2026 The cstnet Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "cstnet/error.hpp"
#include "cstnet/tensor.hpp"

namespace cstnet {

/// Named trainable tensor (or non-trainable buffer) plus its gradient slot.
/// The gradient is allocated on first use so frozen models stay compact.
template <typename S>
struct Parameter {
  std::string name;
  Tensor<S> value;
  Tensor<S> grad;  // same shape as value once materialized
  bool trainable = true;

  Parameter(std::string n, Tensor<S> v, bool train = true)
      : name(std::move(n)), value(std::move(v)), trainable(train) {}

  bool has_grad() const { return grad.shape() == value.shape(); }

  Tensor<S>& ensure_grad() {
    if (!has_grad()) grad = Tensor<S>(value.shape());
    return grad;
  }

  void zero_grad() {
    if (has_grad()) grad.fill(S(0));
  }
};

template <typename S>
class Tape;

/// Handle to a node on a tape. Cheap to copy; valid as long as the tape lives.
template <typename S>
struct Var {
  Tape<S>* tape = nullptr;
  int id = -1;

  bool valid() const { return tape != nullptr && id >= 0; }
  const Tensor<S>& value() const { return tape->value(id); }
  const Shape& shape() const { return value().shape(); }
};

/// Define-by-run reverse-mode tape.
///
/// A tape records one forward pass: every operation appends its output node
/// and a backward rule whose inputs all precede it. backward() replays the
/// rules in reverse, accumulating each node's gradient exactly once per
/// consumer, then scatters leaf gradients into their bound Parameters.
/// Tapes are rebuilt per forward pass and confined to one thread.
template <typename S>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, int out_id)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Leaf holding a copy of `v`. Gradients accumulate on the node and can be
  /// read back with grad_of().
  Var<S> leaf(Tensor<S> v) {
    nodes_.push_back(Node{std::move(v), nullptr, nullptr, Tensor<S>(), false});
    return Var<S>{this, int(nodes_.size()) - 1};
  }

  /// Leaf referencing a parameter's storage (no copy). After backward(), the
  /// node gradient is added into p.grad.
  Var<S> param(Parameter<S>& p) {
    nodes_.push_back(Node{Tensor<S>(), &p.value, &p, Tensor<S>(), false});
    return Var<S>{this, int(nodes_.size()) - 1};
  }

  /// Leaf for values that never need gradients (targets, masks).
  Var<S> constant(Tensor<S> v) { return leaf(std::move(v)); }

  Var<S> record(Tensor<S> out, BackwardFn bw) {
    nodes_.push_back(Node{std::move(out), nullptr, nullptr, Tensor<S>(), false});
    int id = int(nodes_.size()) - 1;
    ops_.push_back(OpRec{id, std::move(bw)});
    return Var<S>{this, id};
  }

  const Tensor<S>& value(int id) const {
    const Node& n = nodes_[std::size_t(id)];
    return n.ref ? *n.ref : n.owned;
  }

  bool has_grad(int id) const { return nodes_[std::size_t(id)].grad_alloc; }

  /// Gradient tensor of a node, allocated as zeros on first access.
  Tensor<S>& grad(int id) {
    Node& n = nodes_[std::size_t(id)];
    if (!n.grad_alloc) {
      n.grad = Tensor<S>(value(id).shape());
      n.grad_alloc = true;
    }
    return n.grad;
  }

  /// dLoss/dNode for a node, zeros if the node is off the loss path.
  Tensor<S> grad_of(Var<S> v) const {
    const Node& n = nodes_[std::size_t(v.id)];
    if (n.grad_alloc) return n.grad;
    return Tensor<S>(value(v.id).shape());
  }

  /// Reverse sweep from a scalar loss node. Node gradients are cleared first,
  /// so repeated calls (with parameter grads reset in between) are identical.
  void backward(Var<S> loss) {
    if (loss.tape != this) throw ContractError("backward: loss node from another tape");
    if (value(loss.id).numel() != 1)
      throw ContractError("backward: loss must be scalar, got shape " +
                          shape_str(value(loss.id).shape()));
    for (Node& n : nodes_) n.grad_alloc = false;
    grad(loss.id).fill(S(1));
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) {
      if (nodes_[std::size_t(it->out)].grad_alloc) it->fn(*this, it->out);
    }
    for (Node& n : nodes_) {
      if (n.bound && n.grad_alloc) {
        Tensor<S>& pg = n.bound->ensure_grad();
        for (Index i = 0; i < pg.numel(); ++i) pg[i] += n.grad[i];
      }
    }
  }

  std::size_t node_count() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor<S> owned;
    const Tensor<S>* ref;
    Parameter<S>* bound;
    Tensor<S> grad;
    bool grad_alloc;
  };
  struct OpRec {
    int out;
    BackwardFn fn;
  };

  std::vector<Node> nodes_;
  std::vector<OpRec> ops_;
};

}  // namespace cstnet
