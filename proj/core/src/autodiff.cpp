// SPDX-License-Identifier: Apache-2.0

#include "ccmd/autodiff.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace ccmd::ad {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

ConstMap cmap(const double* p, std::size_t r, std::size_t c) {
  return ConstMap(p, static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}
MutMap mmap(double* p, std::size_t r, std::size_t c) {
  return MutMap(p, static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}

[[noreturn]] void shape_error(const char* op, const Shape& a, const Shape& b,
                              const std::string& detail = {}) {
  std::ostringstream os;
  os << op << ": incompatible shapes " << to_string(a) << " and " << to_string(b);
  if (!detail.empty()) os << " (" << detail << ")";
  throw std::invalid_argument(os.str());
}

[[noreturn]] void op_error(const char* op, const Shape& a, const std::string& detail) {
  std::ostringstream os;
  os << op << ": invalid input " << to_string(a) << ": " << detail;
  throw std::invalid_argument(os.str());
}

void same_tape(const char* op, const Tensor& a, const Tensor& b) {
  if (!a.valid() || !b.valid()) throw std::invalid_argument(std::string(op) + ": null tensor");
  if (&a.tape() != &b.tape())
    throw std::invalid_argument(std::string(op) + ": inputs recorded on different tapes");
}

void check_valid(const char* op, const Tensor& a) {
  if (!a.valid()) throw std::invalid_argument(std::string(op) + ": null tensor");
}

// Decomposes a shape around `axis` into (outer, n, inner) extents.
struct AxisSplit {
  std::size_t outer = 1, n = 1, inner = 1;
};

AxisSplit split_axis(const Shape& s, std::size_t axis) {
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.n = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

enum class Bcast { Same, Row };

Bcast broadcast_kind(const char* op, const Shape& a, const Shape& b) {
  if (a == b) return Bcast::Same;
  if (b.size() == 1 && !a.empty() && a.back() == b[0]) return Bcast::Row;
  shape_error(op, a, b, "only equal shapes or a row vector over the last axis are allowed");
}

template <typename Fwd, typename Deriv>
Tensor unary(const char* op, const Tensor& a, Fwd fwd, Deriv deriv) {
  check_valid(op, a);
  Tape& tape = a.tape();
  const auto& av = tape.value(a.id());
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i]);
  const NodeId ia = a.id();
  return tape.record(a.shape(), std::move(out), {a}, [ia, deriv](Tape& t, NodeId self) {
    auto ga = t.accum(ia);
    if (ga.empty()) return;
    const auto& g = t.grad_of(self);
    const auto& x = t.value(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * deriv(x[i]);
  });
}

}  // namespace

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

// ---------------------------------------------------------------------------
// Tensor / Tape

const Shape& Tensor::shape() const { return tape_->shape(id_); }
std::size_t Tensor::numel() const { return tape_->value(id_).size(); }
std::span<const double> Tensor::values() const { return tape_->value(id_); }
bool Tensor::requires_grad() const { return tape_->requires_grad(id_); }

double Tensor::item() const {
  const auto& v = tape_->value(id_);
  if (v.size() != 1) op_error("item", shape(), "tensor has more than one element");
  return v[0];
}

Tensor Tape::push(Node node) {
  if (nodes_.size() >= std::numeric_limits<NodeId>::max())
    throw std::length_error("tape: too many nodes");
  nodes_.push_back(std::move(node));
  return Tensor(this, static_cast<NodeId>(nodes_.size() - 1));
}

Tensor Tape::constant(Shape shape, std::vector<double> values) {
  if (numel(shape) != values.size())
    op_error("constant", shape, "expected " + std::to_string(numel(shape)) + " values, got " +
                                    std::to_string(values.size()));
  return push(Node{std::move(shape), std::move(values), {}, {}, false});
}

Tensor Tape::variable(Shape shape, std::vector<double> values) {
  if (numel(shape) != values.size())
    op_error("variable", shape, "expected " + std::to_string(numel(shape)) + " values, got " +
                                    std::to_string(values.size()));
  return push(Node{std::move(shape), std::move(values), {}, {}, true});
}

Tensor Tape::record(Shape shape, std::vector<double> values, std::initializer_list<Tensor> inputs,
                    BackwardFn fn) {
  return record(std::move(shape), std::move(values),
                std::span<const Tensor>(inputs.begin(), inputs.size()), std::move(fn));
}

Tensor Tape::record(Shape shape, std::vector<double> values, std::span<const Tensor> inputs,
                    BackwardFn fn) {
  bool needs = false;
  for (const auto& in : inputs) {
    if (&in.tape() != this) throw std::invalid_argument("tape: input recorded on another tape");
    needs = needs || nodes_[in.id()].requires_grad;
  }
  Node node{std::move(shape), std::move(values), {}, {}, needs};
  if (needs) node.backward = std::move(fn);
  return push(std::move(node));
}

std::span<double> Tape::accum(NodeId id) {
  Node& n = nodes_[id];
  if (!n.requires_grad) return {};
  if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
  return n.grad;
}

void Tape::backward(const Tensor& root) {
  if (&root.tape() != this) throw std::invalid_argument("backward: root belongs to another tape");
  if (root.numel() != 1)
    op_error("backward", root.shape(), "root must be a scalar (one element)");
  for (auto& n : nodes_) n.grad.clear();
  Node& r = nodes_[root.id()];
  if (!r.requires_grad) return;
  r.grad.assign(1, 1.0);
  for (std::size_t k = root.id() + 1; k-- > 0;) {
    Node& n = nodes_[k];
    if (n.grad.empty() || !n.backward) continue;
    n.backward(*this, static_cast<NodeId>(k));
  }
}

std::span<const double> Tape::grad(const Tensor& t) const { return nodes_[t.id()].grad; }
bool Tape::has_grad(const Tensor& t) const { return !nodes_[t.id()].grad.empty(); }

// ---------------------------------------------------------------------------
// Linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
  same_tape("matmul", a, b);
  Tape& tape = a.tape();
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();

  if (sa.size() == 3 && sb.size() == 3) {
    const std::size_t p = sa[0], m = sa[1], k = sa[2], n = sb[2];
    if (sb[0] != p || sb[1] != k) shape_error("matmul", sa, sb, "batched inner dims differ");
    std::vector<double> out(p * m * n);
    const auto& av = tape.value(a.id());
    const auto& bv = tape.value(b.id());
    for (std::size_t q = 0; q < p; ++q)
      mmap(out.data() + q * m * n, m, n).noalias() =
          cmap(av.data() + q * m * k, m, k) * cmap(bv.data() + q * k * n, k, n);
    const NodeId ia = a.id(), ib = b.id();
    return tape.record({p, m, n}, std::move(out), {a, b}, [=](Tape& t, NodeId self) {
      const auto& g = t.grad_of(self);
      auto ga = t.accum(ia);
      auto gb = t.accum(ib);
      const auto& av2 = t.value(ia);
      const auto& bv2 = t.value(ib);
      for (std::size_t q = 0; q < p; ++q) {
        auto gq = cmap(g.data() + q * m * n, m, n);
        if (!ga.empty())
          mmap(ga.data() + q * m * k, m, k).noalias() +=
              gq * cmap(bv2.data() + q * k * n, k, n).transpose();
        if (!gb.empty())
          mmap(gb.data() + q * k * n, k, n).noalias() +=
              cmap(av2.data() + q * m * k, m, k).transpose() * gq;
      }
    });
  }

  if (sb.size() != 2 || sa.empty() || sa.back() != sb[0])
    shape_error("matmul", sa, sb, "expected a[..., k] x b[k, n]");
  const std::size_t k = sb[0], n = sb[1];
  const std::size_t rows = numel(sa) / k;
  Shape out_shape(sa.begin(), sa.end() - 1);
  out_shape.push_back(n);
  std::vector<double> out(rows * n);
  mmap(out.data(), rows, n).noalias() =
      cmap(tape.value(a.id()).data(), rows, k) * cmap(tape.value(b.id()).data(), k, n);
  const NodeId ia = a.id(), ib = b.id();
  return tape.record(std::move(out_shape), std::move(out), {a, b}, [=](Tape& t, NodeId self) {
    auto g = cmap(t.grad_of(self).data(), rows, n);
    auto ga = t.accum(ia);
    auto gb = t.accum(ib);
    if (!ga.empty())
      mmap(ga.data(), rows, k).noalias() += g * cmap(t.value(ib).data(), k, n).transpose();
    if (!gb.empty())
      mmap(gb.data(), k, n).noalias() += cmap(t.value(ia).data(), rows, k).transpose() * g;
  });
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  same_tape("matmul_nt", a, b);
  Tape& tape = a.tape();
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() != 3 || sb.size() != 3 || sa[0] != sb[0] || sa[2] != sb[2])
    shape_error("matmul_nt", sa, sb, "expected a[p, m, k] x b[p, n, k]^T");
  const std::size_t p = sa[0], m = sa[1], k = sa[2], n = sb[1];
  std::vector<double> out(p * m * n);
  const auto& av = tape.value(a.id());
  const auto& bv = tape.value(b.id());
  for (std::size_t q = 0; q < p; ++q)
    mmap(out.data() + q * m * n, m, n).noalias() =
        cmap(av.data() + q * m * k, m, k) * cmap(bv.data() + q * n * k, n, k).transpose();
  const NodeId ia = a.id(), ib = b.id();
  return tape.record({p, m, n}, std::move(out), {a, b}, [=](Tape& t, NodeId self) {
    const auto& g = t.grad_of(self);
    auto ga = t.accum(ia);
    auto gb = t.accum(ib);
    const auto& av2 = t.value(ia);
    const auto& bv2 = t.value(ib);
    for (std::size_t q = 0; q < p; ++q) {
      auto gq = cmap(g.data() + q * m * n, m, n);
      if (!ga.empty())
        mmap(ga.data() + q * m * k, m, k).noalias() += gq * cmap(bv2.data() + q * n * k, n, k);
      if (!gb.empty())
        mmap(gb.data() + q * n * k, n, k).noalias() +=
            gq.transpose() * cmap(av2.data() + q * m * k, m, k);
    }
  });
}

// ---------------------------------------------------------------------------
// Elementwise arithmetic

Tensor add(const Tensor& a, const Tensor& b) {
  same_tape("add", a, b);
  Tape& tape = a.tape();
  const Bcast kind = broadcast_kind("add", a.shape(), b.shape());
  const auto& av = tape.value(a.id());
  const auto& bv = tape.value(b.id());
  std::vector<double> out(av.size());
  const std::size_t w = bv.size();
  if (kind == Bcast::Same) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  } else {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i % w];
  }
  const NodeId ia = a.id(), ib = b.id();
  return tape.record(a.shape(), std::move(out), {a, b}, [=](Tape& t, NodeId self) {
    const auto& g = t.grad_of(self);
    if (auto ga = t.accum(ia); !ga.empty())
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    if (auto gb = t.accum(ib); !gb.empty()) {
      if (kind == Bcast::Same)
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
      else
        for (std::size_t i = 0; i < g.size(); ++i) gb[i % w] += g[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  same_tape("sub", a, b);
  Tape& tape = a.tape();
  const Bcast kind = broadcast_kind("sub", a.shape(), b.shape());
  const auto& av = tape.value(a.id());
  const auto& bv = tape.value(b.id());
  std::vector<double> out(av.size());
  const std::size_t w = bv.size();
  if (kind == Bcast::Same) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  } else {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i % w];
  }
  const NodeId ia = a.id(), ib = b.id();
  return tape.record(a.shape(), std::move(out), {a, b}, [=](Tape& t, NodeId self) {
    const auto& g = t.grad_of(self);
    if (auto ga = t.accum(ia); !ga.empty())
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    if (auto gb = t.accum(ib); !gb.empty()) {
      if (kind == Bcast::Same)
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
      else
        for (std::size_t i = 0; i < g.size(); ++i) gb[i % w] -= g[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  same_tape("mul", a, b);
  Tape& tape = a.tape();
  const Bcast kind = broadcast_kind("mul", a.shape(), b.shape());
  const auto& av = tape.value(a.id());
  const auto& bv = tape.value(b.id());
  std::vector<double> out(av.size());
  const std::size_t w = bv.size();
  if (kind == Bcast::Same) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  } else {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i % w];
  }
  const NodeId ia = a.id(), ib = b.id();
  return tape.record(a.shape(), std::move(out), {a, b}, [=](Tape& t, NodeId self) {
    const auto& g = t.grad_of(self);
    const auto& x = t.value(ia);
    const auto& y = t.value(ib);
    if (auto ga = t.accum(ia); !ga.empty()) {
      if (kind == Bcast::Same)
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i];
      else
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i % w];
    }
    if (auto gb = t.accum(ib); !gb.empty()) {
      if (kind == Bcast::Same)
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * x[i];
      else
        for (std::size_t i = 0; i < g.size(); ++i) gb[i % w] += g[i] * x[i];
    }
  });
}

Tensor scale(const Tensor& a, double factor) {
  check_valid("scale", a);
  return unary("scale", a, [factor](double x) { return factor * x; },
               [factor](double) { return factor; });
}

// ---------------------------------------------------------------------------
// Reductions

Tensor sum(const Tensor& a) {
  check_valid("sum", a);
  Tape& tape = a.tape();
  const auto& av = tape.value(a.id());
  double s = 0.0;
  for (double x : av) s += x;
  const NodeId ia = a.id();
  return tape.record({}, {s}, {a}, [ia](Tape& t, NodeId self) {
    const double g = t.grad_of(self)[0];
    for (auto& v : t.accum(ia)) v += g;
  });
}

Tensor mean(const Tensor& a) {
  check_valid("mean", a);
  if (a.numel() == 0) op_error("mean", a.shape(), "empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor sum_axis(const Tensor& a, std::size_t axis) {
  check_valid("sum_axis", a);
  const Shape& sa = a.shape();
  if (axis >= sa.size()) op_error("sum_axis", sa, "axis " + std::to_string(axis) + " out of range");
  Tape& tape = a.tape();
  const AxisSplit sp = split_axis(sa, axis);
  const auto& av = tape.value(a.id());
  std::vector<double> out(sp.outer * sp.inner, 0.0);
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t k = 0; k < sp.n; ++k) {
      const double* src = av.data() + (o * sp.n + k) * sp.inner;
      double* dst = out.data() + o * sp.inner;
      for (std::size_t i = 0; i < sp.inner; ++i) dst[i] += src[i];
    }
  Shape out_shape = sa;
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  const NodeId ia = a.id();
  return tape.record(std::move(out_shape), std::move(out), {a}, [ia, sp](Tape& t, NodeId self) {
    auto ga = t.accum(ia);
    const auto& g = t.grad_of(self);
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t k = 0; k < sp.n; ++k) {
        double* dst = ga.data() + (o * sp.n + k) * sp.inner;
        const double* src = g.data() + o * sp.inner;
        for (std::size_t i = 0; i < sp.inner; ++i) dst[i] += src[i];
      }
  });
}

Tensor mean_axis(const Tensor& a, std::size_t axis) {
  check_valid("mean_axis", a);
  if (axis >= a.rank()) op_error("mean_axis", a.shape(), "axis out of range");
  if (a.dim(axis) == 0) op_error("mean_axis", a.shape(), "empty axis");
  return scale(sum_axis(a, axis), 1.0 / static_cast<double>(a.dim(axis)));
}

// ---------------------------------------------------------------------------
// Structural ops

Tensor concat(std::span<const Tensor> parts, std::size_t axis) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  const Tensor& first = parts[0];
  check_valid("concat", first);
  const Shape& s0 = first.shape();
  if (axis >= s0.size()) op_error("concat", s0, "axis out of range");
  std::size_t total = 0;
  for (const auto& p : parts) {
    same_tape("concat", first, p);
    const Shape& sp = p.shape();
    bool ok = sp.size() == s0.size();
    for (std::size_t i = 0; ok && i < s0.size(); ++i) ok = (i == axis) || sp[i] == s0[i];
    if (!ok) shape_error("concat", s0, sp, "all axes except the concat axis must match");
    total += sp[axis];
  }
  Tape& tape = first.tape();
  Shape out_shape = s0;
  out_shape[axis] = total;
  const AxisSplit so = split_axis(out_shape, axis);
  std::vector<double> out(numel(out_shape));
  std::vector<NodeId> ids;
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    const auto& pv = tape.value(p.id());
    const std::size_t n = p.dim(axis);
    for (std::size_t o = 0; o < so.outer; ++o)
      std::copy_n(pv.data() + o * n * so.inner, n * so.inner,
                  out.data() + (o * so.n + off) * so.inner);
    ids.push_back(p.id());
    offsets.push_back(off);
    off += n;
  }
  return tape.record(std::move(out_shape), std::move(out), parts,
                     [ids, offsets, so, axis](Tape& t, NodeId self) {
                       const auto& g = t.grad_of(self);
                       for (std::size_t j = 0; j < ids.size(); ++j) {
                         auto gp = t.accum(ids[j]);
                         if (gp.empty()) continue;
                         const std::size_t n = t.shape(ids[j])[axis];
                         for (std::size_t o = 0; o < so.outer; ++o) {
                           const double* src = g.data() + (o * so.n + offsets[j]) * so.inner;
                           double* dst = gp.data() + o * n * so.inner;
                           for (std::size_t i = 0; i < n * so.inner; ++i) dst[i] += src[i];
                         }
                       }
                     });
}

Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end) {
  check_valid("slice", a);
  const Shape& sa = a.shape();
  if (axis >= sa.size()) op_error("slice", sa, "axis out of range");
  if (begin > end || end > sa[axis])
    op_error("slice", sa,
             "range [" + std::to_string(begin) + ", " + std::to_string(end) + ") out of bounds");
  Tape& tape = a.tape();
  const AxisSplit sp = split_axis(sa, axis);
  const std::size_t n = end - begin;
  const auto& av = tape.value(a.id());
  std::vector<double> out(sp.outer * n * sp.inner);
  for (std::size_t o = 0; o < sp.outer; ++o)
    std::copy_n(av.data() + (o * sp.n + begin) * sp.inner, n * sp.inner,
                out.data() + o * n * sp.inner);
  Shape out_shape = sa;
  out_shape[axis] = n;
  const NodeId ia = a.id();
  return tape.record(std::move(out_shape), std::move(out), {a},
                     [ia, sp, n, begin](Tape& t, NodeId self) {
                       auto ga = t.accum(ia);
                       const auto& g = t.grad_of(self);
                       for (std::size_t o = 0; o < sp.outer; ++o) {
                         const double* src = g.data() + o * n * sp.inner;
                         double* dst = ga.data() + (o * sp.n + begin) * sp.inner;
                         for (std::size_t i = 0; i < n * sp.inner; ++i) dst[i] += src[i];
                       }
                     });
}

Tensor reshape(const Tensor& a, Shape shape) {
  check_valid("reshape", a);
  if (numel(shape) != a.numel()) shape_error("reshape", a.shape(), shape, "element count differs");
  Tape& tape = a.tape();
  const NodeId ia = a.id();
  return tape.record(std::move(shape), tape.value(ia), {a}, [ia](Tape& t, NodeId self) {
    auto ga = t.accum(ia);
    const auto& g = t.grad_of(self);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

namespace {

// Maps each output linear index of a permutation to its input linear index.
std::vector<std::size_t> permute_index(const Shape& in, std::span<const std::size_t> axes) {
  const std::size_t r = in.size();
  std::vector<std::size_t> in_stride(r, 1);
  for (std::size_t i = r; i-- > 1;) in_stride[i - 1] = in_stride[i] * in[i];
  Shape out(r);
  std::vector<std::size_t> stride(r);
  for (std::size_t i = 0; i < r; ++i) {
    out[i] = in[axes[i]];
    stride[i] = in_stride[axes[i]];
  }
  const std::size_t total = numel(in);
  std::vector<std::size_t> map(total);
  std::vector<std::size_t> counter(r, 0);
  std::size_t src = 0;
  for (std::size_t k = 0; k < total; ++k) {
    map[k] = src;
    for (std::size_t i = r; i-- > 0;) {
      if (++counter[i] < out[i]) {
        src += stride[i];
        break;
      }
      src -= stride[i] * (out[i] - 1);
      counter[i] = 0;
    }
  }
  return map;
}

}  // namespace

Tensor permute(const Tensor& a, std::span<const std::size_t> axes) {
  check_valid("permute", a);
  const Shape& sa = a.shape();
  if (axes.size() != sa.size()) op_error("permute", sa, "axis list length differs from rank");
  std::vector<bool> seen(sa.size(), false);
  for (std::size_t ax : axes) {
    if (ax >= sa.size() || seen[ax]) op_error("permute", sa, "axes must be a permutation");
    seen[ax] = true;
  }
  Tape& tape = a.tape();
  auto map = permute_index(sa, axes);
  Shape out_shape(sa.size());
  for (std::size_t i = 0; i < sa.size(); ++i) out_shape[i] = sa[axes[i]];
  const auto& av = tape.value(a.id());
  std::vector<double> out(av.size());
  for (std::size_t k = 0; k < out.size(); ++k) out[k] = av[map[k]];
  const NodeId ia = a.id();
  return tape.record(std::move(out_shape), std::move(out), {a},
                     [ia, map = std::move(map)](Tape& t, NodeId self) {
                       auto ga = t.accum(ia);
                       const auto& g = t.grad_of(self);
                       for (std::size_t k = 0; k < g.size(); ++k) ga[map[k]] += g[k];
                     });
}

// ---------------------------------------------------------------------------
// Nonlinearities

Tensor relu(const Tensor& a) {
  return unary("relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
               [](double x) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor gelu(const Tensor& a) {
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  constexpr double kInvSqrt2Pi = 0.39894228040143267794;
  return unary(
      "gelu", a, [](double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); },
      [](double x) {
        return 0.5 * (1.0 + std::erf(x * kInvSqrt2)) + x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
      });
}

Tensor abs(const Tensor& a) {
  return unary("abs", a, [](double x) { return std::fabs(x); },
               [](double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Tensor softmax_row(const Tensor& a) {
  check_valid("softmax_row", a);
  const Shape& sa = a.shape();
  if (sa.empty() || sa.back() == 0) op_error("softmax_row", sa, "needs a non-empty last axis");
  Tape& tape = a.tape();
  const std::size_t w = sa.back();
  const std::size_t rows = a.numel() / w;
  const auto& av = tape.value(a.id());
  std::vector<double> out(av.size());
  constexpr double kNegInf = -std::numeric_limits<double>::infinity();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = av.data() + r * w;
    double* y = out.data() + r * w;
    const double mx = *std::max_element(x, x + w);
    if (mx == kNegInf) {
      std::fill(y, y + w, 0.0);
      continue;
    }
    double z = 0.0;
    for (std::size_t i = 0; i < w; ++i) {
      y[i] = std::exp(x[i] - mx);
      z += y[i];
    }
    for (std::size_t i = 0; i < w; ++i) y[i] /= z;
  }
  const NodeId ia = a.id();
  const NodeId self_id = static_cast<NodeId>(tape.size());
  return tape.record(sa, std::move(out), {a}, [ia, w, rows, self_id](Tape& t, NodeId self) {
    auto ga = t.accum(ia);
    const auto& g = t.grad_of(self);
    const auto& y = t.value(self_id);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* yr = y.data() + r * w;
      const double* gr = g.data() + r * w;
      double dot = 0.0;
      for (std::size_t i = 0; i < w; ++i) dot += yr[i] * gr[i];
      double* dst = ga.data() + r * w;
      for (std::size_t i = 0; i < w; ++i) dst[i] += yr[i] * (gr[i] - dot);
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  same_tape("layer_norm", x, gain);
  same_tape("layer_norm", x, bias);
  const Shape& sx = x.shape();
  if (sx.empty() || sx.back() == 0) op_error("layer_norm", sx, "needs a non-empty last axis");
  const std::size_t w = sx.back();
  if (gain.shape() != Shape{w}) shape_error("layer_norm", sx, gain.shape(), "gain");
  if (bias.shape() != Shape{w}) shape_error("layer_norm", sx, bias.shape(), "bias");
  if (!(eps > 0.0)) op_error("layer_norm", sx, "epsilon must be positive");
  Tape& tape = x.tape();
  const std::size_t rows = x.numel() / w;
  const auto& xv = tape.value(x.id());
  const auto& gv = tape.value(gain.id());
  const auto& bv = tape.value(bias.id());
  std::vector<double> xhat(xv.size());
  std::vector<double> rstd(rows);
  std::vector<double> out(xv.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xv.data() + r * w;
    double mu = 0.0;
    for (std::size_t i = 0; i < w; ++i) mu += xr[i];
    mu /= static_cast<double>(w);
    double var = 0.0;
    for (std::size_t i = 0; i < w; ++i) var += (xr[i] - mu) * (xr[i] - mu);
    var /= static_cast<double>(w);
    const double rs = 1.0 / std::sqrt(var + eps);
    rstd[r] = rs;
    for (std::size_t i = 0; i < w; ++i) {
      const double h = (xr[i] - mu) * rs;
      xhat[r * w + i] = h;
      out[r * w + i] = h * gv[i] + bv[i];
    }
  }
  const NodeId ix = x.id(), ig = gain.id(), ib = bias.id();
  return tape.record(
      sx, std::move(out), {x, gain, bias},
      [ix, ig, ib, w, rows, xhat = std::move(xhat), rstd = std::move(rstd)](Tape& t, NodeId self) {
        const auto& g = t.grad_of(self);
        const auto& gv2 = t.value(ig);
        auto gx = t.accum(ix);
        auto gg = t.accum(ig);
        auto gb = t.accum(ib);
        const double inv_w = 1.0 / static_cast<double>(w);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* gr = g.data() + r * w;
          const double* hr = xhat.data() + r * w;
          if (!gg.empty())
            for (std::size_t i = 0; i < w; ++i) gg[i] += gr[i] * hr[i];
          if (!gb.empty())
            for (std::size_t i = 0; i < w; ++i) gb[i] += gr[i];
          if (gx.empty()) continue;
          double m1 = 0.0, m2 = 0.0;
          for (std::size_t i = 0; i < w; ++i) {
            const double dh = gr[i] * gv2[i];
            m1 += dh;
            m2 += dh * hr[i];
          }
          m1 *= inv_w;
          m2 *= inv_w;
          double* dst = gx.data() + r * w;
          for (std::size_t i = 0; i < w; ++i)
            dst[i] += rstd[r] * (gr[i] * gv2[i] - m1 - hr[i] * m2);
        }
      });
}

Tensor embedding_lookup(const Tensor& table, std::span<const int> ids) {
  check_valid("embedding_lookup", table);
  const Shape& st = table.shape();
  if (st.size() != 2) op_error("embedding_lookup", st, "table must be rank 2");
  const std::size_t v = st[0], d = st[1];
  Tape& tape = table.tape();
  const auto& tv = tape.value(table.id());
  std::vector<double> out(ids.size() * d);
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] < 0 || static_cast<std::size_t>(ids[r]) >= v)
      op_error("embedding_lookup", st, "id " + std::to_string(ids[r]) + " out of range");
    std::copy_n(tv.data() + static_cast<std::size_t>(ids[r]) * d, d, out.data() + r * d);
  }
  const NodeId it = table.id();
  std::vector<int> saved(ids.begin(), ids.end());
  return tape.record({ids.size(), d}, std::move(out), {table},
                     [it, d, saved = std::move(saved)](Tape& t, NodeId self) {
                       auto gt = t.accum(it);
                       const auto& g = t.grad_of(self);
                       for (std::size_t r = 0; r < saved.size(); ++r) {
                         double* dst = gt.data() + static_cast<std::size_t>(saved[r]) * d;
                         const double* src = g.data() + r * d;
                         for (std::size_t i = 0; i < d; ++i) dst[i] += src[i];
                       }
                     });
}

}  // namespace ccmd::ad
