// SPDX-License-Identifier: Apache-2.0
//
// Dense double-precision reverse-mode automatic differentiation.
//
// A Tape records every operation in the order it is executed (define-by-run).
// Tensors are lightweight handles into a tape; the tape owns values and
// gradients. After Tape::backward(root) every node that lies on a path from a
// gradient-requiring leaf to the root holds a gradient of its own shape, so
// intermediate activations can be inspected as well as parameters.
//
// Broadcasting is limited to a rank-1 row vector applied over the last axis
// of a larger tensor. Every other shape coercion is explicit.

#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace ccmd::ad {

using Shape = std::vector<std::size_t>;
using NodeId = std::uint32_t;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

class Tape;

/// Handle to a node on a Tape. Cheap to copy; valid as long as the tape lives.
class Tensor {
 public:
  Tensor() = default;

  bool valid() const { return tape_ != nullptr; }
  Tape& tape() const { return *tape_; }
  NodeId id() const { return id_; }

  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const { return shape().at(axis); }
  std::size_t numel() const;
  std::span<const double> values() const;
  bool requires_grad() const;

  /// Value of a one-element tensor.
  double item() const;

 private:
  friend class Tape;
  Tensor(Tape* tape, NodeId id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  NodeId id_ = 0;
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, NodeId)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Tensor constant(Shape shape, std::vector<double> values);
  Tensor variable(Shape shape, std::vector<double> values);
  Tensor scalar(double value) { return constant({}, {value}); }

  /// Records an op output. `fn` is dropped when no input requires a gradient.
  Tensor record(Shape shape, std::vector<double> values,
                std::initializer_list<Tensor> inputs, BackwardFn fn);
  Tensor record(Shape shape, std::vector<double> values,
                std::span<const Tensor> inputs, BackwardFn fn);

  /// Reverse-topological accumulation from a one-element root.
  void backward(const Tensor& root);

  /// Gradient of `t` after backward(); empty span if `t` was not reached.
  std::span<const double> grad(const Tensor& t) const;
  bool has_grad(const Tensor& t) const;

  std::size_t size() const { return nodes_.size(); }

  // Node access used by op implementations.
  const Shape& shape(NodeId id) const { return nodes_[id].shape; }
  const std::vector<double>& value(NodeId id) const { return nodes_[id].value; }
  bool requires_grad(NodeId id) const { return nodes_[id].requires_grad; }
  const std::vector<double>& grad_of(NodeId id) const { return nodes_[id].grad; }
  /// Mutable gradient buffer of `id`, zero-initialised on first use.
  std::span<double> accum(NodeId id);

 private:
  struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;
    BackwardFn backward;
    bool requires_grad = false;
  };

  Tensor push(Node node);

  // deque: references to existing nodes stay valid while new ops are pushed.
  std::deque<Node> nodes_;
};

// ---------------------------------------------------------------------------
// Forward ops. All inputs of one op must live on the same tape. Shape errors
// throw std::invalid_argument naming the op and the offending shapes.

/// a[..., k] x b[k, n] -> [..., n]; or batched a[p, m, k] x b[p, k, n] -> [p, m, n].
Tensor matmul(const Tensor& a, const Tensor& b);
/// Batched a[p, m, k] x b[p, n, k]^T -> [p, m, n].
Tensor matmul_nt(const Tensor& a, const Tensor& b);

/// Elementwise; `b` may also be a rank-1 row vector matching a's last axis.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor sum_axis(const Tensor& a, std::size_t axis);
Tensor mean_axis(const Tensor& a, std::size_t axis);

Tensor concat(std::span<const Tensor> parts, std::size_t axis);
Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end);
Tensor reshape(const Tensor& a, Shape shape);
Tensor permute(const Tensor& a, std::span<const std::size_t> axes);

Tensor relu(const Tensor& a);
Tensor gelu(const Tensor& a);
/// |a| with derivative sign(a) and sign(0) = 0.
Tensor abs(const Tensor& a);
/// Softmax over the last axis. -inf entries receive exactly zero weight.
Tensor softmax_row(const Tensor& a);
/// Normalises over the last axis, then applies gain/bias of that width.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps);
/// Gathers rows of table[v, d] -> [ids.size(), d].
Tensor embedding_lookup(const Tensor& table, std::span<const int> ids);

}  // namespace ccmd::ad
