// Copyright 2026 The seqrec Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "seqrec/numerics/tensor.hpp"

namespace seqrec {

/// Additive value used by causal masking; finite so that backward through
/// the masked softmax never sees inf - inf.
inline constexpr double kMaskValue = -1e9;
inline constexpr double kLayerNormEps = 1e-5;

/// Computation graph with reverse-mode differentiation.
///
/// Operators are recorded first (shapes are inferred and checked at record
/// time), then `forward()` evaluates every node in insertion order, which is
/// a topological order because a node can only reference existing nodes.
/// `backward(loss)` propagates from a scalar node. Parameter leaves read
/// external storage and accumulate their gradient into an external sink, so
/// many graphs can share one parameter set and one gradient buffer.
template <class T>
class BasicGraph {
 public:
  using TensorT = BasicTensor<T>;

  struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
  };

  enum class Op {
    kParameter, kInput, kConstant,
    kMatMul, kAdd, kMultiply, kScale, kSoftmax, kLayerNorm, kGelu,
    kGather, kGatherMean, kMean, kConcat, kCausalMask, kDot,
    kReshape, kCrossEntropy, kSum,
  };

  static const char* op_name(Op op) {
    switch (op) {
      case Op::kParameter: return "parameter";
      case Op::kInput: return "input";
      case Op::kConstant: return "constant";
      case Op::kMatMul: return "matmul";
      case Op::kAdd: return "add";
      case Op::kMultiply: return "multiply";
      case Op::kScale: return "scale";
      case Op::kSoftmax: return "softmax";
      case Op::kLayerNorm: return "layer_norm";
      case Op::kGelu: return "gelu";
      case Op::kGather: return "gather";
      case Op::kGatherMean: return "gather_mean";
      case Op::kMean: return "mean";
      case Op::kConcat: return "concat";
      case Op::kCausalMask: return "causal_mask";
      case Op::kDot: return "dot";
      case Op::kReshape: return "reshape";
      case Op::kCrossEntropy: return "cross_entropy";
      case Op::kSum: return "sum";
    }
    return "?";
  }

  // ---- leaves -------------------------------------------------------------

  /// Leaf backed by external storage. A null sink marks the leaf frozen: no
  /// gradient is computed for it.
  Var parameter(const TensorT& value, TensorT* grad_sink, std::string label = {}) {
    if (grad_sink && grad_sink->shape() != value.shape())
      throw NumericError("parameter '" + label + "': gradient sink shape " +
                         shape_string(grad_sink->shape()) + " differs from value shape " +
                         shape_string(value.shape()));
    Node& n = push(Op::kParameter, {}, value.shape(), std::move(label));
    n.external = &value;
    n.sink = grad_sink;
    n.requires_grad = grad_sink != nullptr;
    return last();
  }

  /// Differentiable leaf owning its value; its gradient is read with grad().
  Var input(TensorT value, std::string label = {}) {
    Node& n = push(Op::kInput, {}, value.shape(), std::move(label));
    n.value = std::move(value);
    n.requires_grad = true;
    return last();
  }

  Var constant(TensorT value, std::string label = {}) {
    Node& n = push(Op::kConstant, {}, value.shape(), std::move(label));
    n.value = std::move(value);
    return last();
  }

  /// Replaces the value of an input or constant leaf; the graph must be
  /// forwarded again before values or gradients are read.
  void set_value(Var v, TensorT value) {
    Node& n = node(v);
    if (n.op != Op::kInput && n.op != Op::kConstant)
      throw NumericError(describe(v) + ": only input and constant leaves can be rebound");
    if (value.shape() != n.shape)
      throw NumericError(describe(v) + ": rebinding with shape " + shape_string(value.shape()) +
                         ", expected " + shape_string(n.shape));
    n.value = std::move(value);
    forwarded_ = false;
  }

  // ---- operators ----------------------------------------------------------

  /// a(m×k)·b(k×n), or a(m×k)·b(n×k)ᵀ when transpose_b.
  Var matmul(Var a, Var b, bool transpose_b = false) {
    const Shape& sa = shape(a);
    const Shape& sb = shape(b);
    if (sa.size() != 2 || sb.size() != 2)
      fail(Op::kMatMul, "operands must be rank 2, got " + shape_string(sa) + " and " + shape_string(sb));
    const std::size_t k_b = transpose_b ? sb[1] : sb[0];
    const std::size_t n = transpose_b ? sb[0] : sb[1];
    if (sa[1] != k_b)
      fail(Op::kMatMul, "inner dimensions differ: " + shape_string(sa) + " x " + shape_string(sb) +
                            (transpose_b ? "ᵀ" : ""));
    Node& node_ref = push(Op::kMatMul, {a, b}, {sa[0], n});
    node_ref.flag = transpose_b;
    return last();
  }

  /// Elementwise sum; b may also be a row vector ({n} or {1,n}) broadcast
  /// over the rows of a.
  Var add(Var a, Var b) {
    const Shape& sa = shape(a);
    const Shape& sb = shape(b);
    bool broadcast = false;
    if (sa != sb) {
      const bool row_vec = (sb.size() == 1 || (sb.size() == 2 && sb[0] == 1)) && !sa.empty() &&
                           sb.back() == sa.back();
      if (!row_vec) fail(Op::kAdd, "cannot add " + shape_string(sa) + " and " + shape_string(sb));
      broadcast = true;
    }
    Node& n = push(Op::kAdd, {a, b}, sa);
    n.flag = broadcast;
    return last();
  }

  Var multiply(Var a, Var b) {
    if (shape(a) != shape(b))
      fail(Op::kMultiply, "shapes differ: " + shape_string(shape(a)) + " vs " + shape_string(shape(b)));
    push(Op::kMultiply, {a, b}, shape(a));
    return last();
  }

  Var scale(Var a, T factor) {
    Node& n = push(Op::kScale, {a}, shape(a));
    n.scalar = factor;
    return last();
  }

  /// Softmax over the last axis.
  Var softmax(Var a) {
    push(Op::kSoftmax, {a}, shape(a));
    return last();
  }

  /// Row-wise normalization with affine gain and bias of the row width.
  Var layer_norm(Var x, Var gain, Var bias) {
    const Shape& sx = shape(x);
    if (sx.empty()) fail(Op::kLayerNorm, "input must have rank >= 1");
    const Shape want{sx.back()};
    if (shape(gain) != want || shape(bias) != want)
      fail(Op::kLayerNorm, "gain/bias must have shape " + shape_string(want) + ", got " +
                               shape_string(shape(gain)) + "/" + shape_string(shape(bias)));
    push(Op::kLayerNorm, {x, gain, bias}, sx);
    return last();
  }

  /// GELU, tanh approximation: 0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³))).
  Var gelu(Var a) {
    push(Op::kGelu, {a}, shape(a));
    return last();
  }

  /// Rows of a rank-2 table selected by index.
  Var gather(Var table, std::vector<std::int32_t> rows) {
    const Shape& st = shape(table);
    if (st.size() != 2) fail(Op::kGather, "table must be rank 2, got " + shape_string(st));
    check_indices(Op::kGather, rows, st[0]);
    Node& n = push(Op::kGather, {table}, {rows.size(), st[1]});
    n.indices = std::move(rows);
    return last();
  }

  /// Mean of table rows per segment: output row s averages
  /// table[indices[offsets[s]..offsets[s+1])]. Every segment must be non-empty.
  Var gather_mean(Var table, std::vector<std::int32_t> indices, std::vector<std::size_t> offsets) {
    const Shape& st = shape(table);
    if (st.size() != 2) fail(Op::kGatherMean, "table must be rank 2, got " + shape_string(st));
    if (offsets.empty() || offsets.front() != 0 || offsets.back() != indices.size())
      fail(Op::kGatherMean, "segment offsets must start at 0 and end at the index count");
    for (std::size_t s = 0; s + 1 < offsets.size(); ++s)
      if (offsets[s + 1] <= offsets[s]) fail(Op::kGatherMean, "segment " + std::to_string(s) + " is empty");
    check_indices(Op::kGatherMean, indices, st[0]);
    Node& n = push(Op::kGatherMean, {table}, {offsets.size() - 1, st[1]});
    n.indices = std::move(indices);
    n.offsets = std::move(offsets);
    return last();
  }

  /// Mean over one axis, keeping the axis with extent 1. Rank-1 input
  /// reduces to shape {1}.
  Var mean(Var a, int axis) {
    const Shape& s = shape(a);
    Shape out;
    if (s.size() == 1 && axis == 0) {
      out = {1};
    } else if (s.size() == 2 && (axis == 0 || axis == 1)) {
      out = s;
      out[static_cast<std::size_t>(axis)] = 1;
    } else {
      fail(Op::kMean, "unsupported axis " + std::to_string(axis) + " for shape " + shape_string(s));
    }
    Node& n = push(Op::kMean, {a}, out);
    n.axis = axis;
    return last();
  }

  Var concat(std::span<const Var> parts, int axis) {
    if (parts.empty()) fail(Op::kConcat, "no operands");
    if (axis != 0 && axis != 1) fail(Op::kConcat, "axis must be 0 or 1");
    Shape out = shape(parts[0]);
    if (out.size() != 2) fail(Op::kConcat, "operands must be rank 2");
    const std::size_t keep = axis == 0 ? 1 : 0;
    for (std::size_t i = 1; i < parts.size(); ++i) {
      const Shape& s = shape(parts[i]);
      if (s.size() != 2 || s[keep] != out[keep])
        fail(Op::kConcat, "operand " + std::to_string(i) + " has shape " + shape_string(s) +
                              ", incompatible with " + shape_string(shape(parts[0])));
      out[static_cast<std::size_t>(axis)] += s[static_cast<std::size_t>(axis)];
    }
    std::vector<Var> ins(parts.begin(), parts.end());
    Node& n = push(Op::kConcat, ins, out);
    n.axis = axis;
    return last();
  }

  /// Adds kMaskValue to every entry (i, j) with j > i of a square matrix.
  Var causal_mask(Var a) {
    const Shape& s = shape(a);
    if (s.size() != 2 || s[0] != s[1]) fail(Op::kCausalMask, "expects a square matrix, got " + shape_string(s));
    push(Op::kCausalMask, {a}, s);
    return last();
  }

  /// Row-wise dot product: (m×n)·(m×n) → (m×1); rank-1 operands give {1}.
  Var dot(Var a, Var b) {
    const Shape& s = shape(a);
    if (s != shape(b)) fail(Op::kDot, "shapes differ: " + shape_string(s) + " vs " + shape_string(shape(b)));
    if (s.size() != 1 && s.size() != 2) fail(Op::kDot, "operands must be rank 1 or 2");
    push(Op::kDot, {a, b}, s.size() == 1 ? Shape{1} : Shape{s[0], 1});
    return last();
  }

  Var reshape(Var a, Shape to) {
    if (shape_size(to) != shape_size(shape(a)))
      fail(Op::kReshape, "cannot reshape " + shape_string(shape(a)) + " to " + shape_string(to));
    push(Op::kReshape, {a}, std::move(to));
    return last();
  }

  /// Per-row softmax cross-entropy of logits (m×n) against target columns;
  /// output (m×1). Evaluated in double precision.
  Var cross_entropy(Var logits, std::vector<std::int32_t> targets) {
    const Shape& s = shape(logits);
    if (s.size() != 2) fail(Op::kCrossEntropy, "logits must be rank 2");
    if (targets.size() != s[0])
      fail(Op::kCrossEntropy, "got " + std::to_string(targets.size()) + " targets for " +
                                  std::to_string(s[0]) + " rows");
    check_indices(Op::kCrossEntropy, targets, s[1]);
    Node& n = push(Op::kCrossEntropy, {logits}, {s[0], 1});
    n.indices = std::move(targets);
    return last();
  }

  /// Sum of all entries, accumulated in double precision.
  Var sum(Var a) {
    push(Op::kSum, {a}, {1});
    return last();
  }

  // ---- evaluation ---------------------------------------------------------

  void forward() {
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      forward_node(nodes_[i]);
#ifndef NDEBUG
      if (!all_finite<T>(value_of(nodes_[i]).values()))
        throw NumericError(describe(Var{static_cast<int>(i)}) + ": non-finite value in forward pass");
#endif
    }
    forwarded_ = true;
    backpropagated_ = false;
  }

  /// Propagates d(loss)/d(node)·seed to every differentiable leaf. Parameter
  /// gradients are added to their sinks; input gradients are reset first.
  void backward(Var loss, T seed = T{1}) {
    if (!forwarded_) throw NumericError("backward called before forward");
    if (backpropagated_) throw NumericError("backward already executed for this forward pass");
    Node& root = node(loss);
    if (shape_size(root.shape) != 1)
      throw NumericError(describe(loss) + ": backward needs a scalar, got " + shape_string(root.shape));
    for (Node& n : nodes_)
      if (n.op != Op::kParameter) n.grad = TensorT();
    backpropagated_ = true;
    if (!root.requires_grad) return;
    grad_buffer(loss.id)[0] += seed;
    for (int i = loss.id; i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (!n.requires_grad || n.op == Op::kParameter || n.op == Op::kInput) continue;
      if (n.grad.empty()) continue;
      backward_node(i);
    }
  }

  const TensorT& value(Var v) const {
    if (!forwarded_) throw NumericError(describe(v) + ": value read before forward");
    return value_of(node(v));
  }

  /// Gradient of an input leaf from the last backward pass (zeros if the
  /// loss does not depend on it).
  TensorT grad(Var v) const {
    const Node& n = node(v);
    if (n.op != Op::kInput) throw NumericError(describe(v) + ": grad() is only available for inputs");
    if (!backpropagated_) throw NumericError(describe(v) + ": grad read before backward");
    return n.grad.empty() ? TensorT(n.shape) : n.grad;
  }

  const Shape& shape(Var v) const { return node(v).shape; }
  std::size_t node_count() const { return nodes_.size(); }
  bool requires_grad(Var v) const { return node(v).requires_grad; }

  std::string describe(Var v) const {
    const Node& n = node(v);
    std::string s = std::string(op_name(n.op)) + "#" + std::to_string(v.id);
    if (!n.label.empty()) s += " '" + n.label + "'";
    return s;
  }

 private:
  struct Node {
    Op op;
    std::vector<int> in;
    Shape shape;
    std::string label;
    TensorT value;
    TensorT grad;
    const TensorT* external = nullptr;
    TensorT* sink = nullptr;
    bool requires_grad = false;
    bool flag = false;
    int axis = 0;
    T scalar{};
    std::vector<std::int32_t> indices;
    std::vector<std::size_t> offsets;
    std::vector<T> saved;
  };

  Node& push(Op op, std::vector<Var> inputs, Shape shape, std::string label = {}) {
    Node n;
    n.op = op;
    n.shape = std::move(shape);
    n.label = std::move(label);
    for (Var v : inputs) {
      node(v);  // validates the reference
      n.in.push_back(v.id);
      n.requires_grad = n.requires_grad || nodes_[static_cast<std::size_t>(v.id)].requires_grad;
    }
    nodes_.push_back(std::move(n));
    forwarded_ = false;
    return nodes_.back();
  }

  Var last() const { return Var{static_cast<int>(nodes_.size()) - 1}; }

  [[noreturn]] void fail(Op op, const std::string& what) const {
    throw NumericError(std::string(op_name(op)) + "#" + std::to_string(nodes_.size()) + ": " + what);
  }

  void check_indices(Op op, const std::vector<std::int32_t>& idx, std::size_t bound) const {
    for (std::int32_t i : idx)
      if (i < 0 || static_cast<std::size_t>(i) >= bound)
        fail(op, "index " + std::to_string(i) + " out of range [0," + std::to_string(bound) + ")");
  }

  Node& node(Var v) {
    if (v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size())
      throw NumericError("invalid graph variable " + std::to_string(v.id));
    return nodes_[static_cast<std::size_t>(v.id)];
  }
  const Node& node(Var v) const { return const_cast<BasicGraph*>(this)->node(v); }

  const TensorT& value_of(const Node& n) const { return n.external ? *n.external : n.value; }
  const TensorT& in_value(const Node& n, std::size_t k) const {
    return value_of(nodes_[static_cast<std::size_t>(n.in[k])]);
  }

  TensorT& grad_buffer(int id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.op == Op::kParameter) return *n.sink;
    if (n.grad.empty()) n.grad = TensorT(n.shape);
    return n.grad;
  }

  bool wants_grad(const Node& n, std::size_t k) const {
    return nodes_[static_cast<std::size_t>(n.in[k])].requires_grad;
  }

  void forward_node(Node& n) {
    switch (n.op) {
      case Op::kParameter:
      case Op::kInput:
      case Op::kConstant:
        return;
      default:
        break;
    }
    TensorT out(n.shape);
    T* y = out.data();
    switch (n.op) {
      case Op::kMatMul: {
        const TensorT& a = in_value(n, 0);
        const TensorT& b = in_value(n, 1);
        const std::size_t m = a.dim(0), k = a.dim(1), cols = n.shape[1];
        if (n.flag)
          kernel::gemm_nt(a.data(), b.data(), y, m, k, cols);
        else
          kernel::gemm_nn(a.data(), b.data(), y, m, k, cols);
        break;
      }
      case Op::kAdd: {
        const TensorT& a = in_value(n, 0);
        const TensorT& b = in_value(n, 1);
        if (!n.flag) {
          for (std::size_t i = 0; i < a.size(); ++i) y[i] = a[i] + b[i];
        } else {
          const std::size_t c = a.cols();
          for (std::size_t r = 0; r < a.rows(); ++r)
            for (std::size_t j = 0; j < c; ++j) y[r * c + j] = a[r * c + j] + b[j];
        }
        break;
      }
      case Op::kMultiply: {
        const TensorT& a = in_value(n, 0);
        const TensorT& b = in_value(n, 1);
        for (std::size_t i = 0; i < a.size(); ++i) y[i] = a[i] * b[i];
        break;
      }
      case Op::kScale: {
        const TensorT& a = in_value(n, 0);
        for (std::size_t i = 0; i < a.size(); ++i) y[i] = a[i] * n.scalar;
        break;
      }
      case Op::kSoftmax: {
        const TensorT& a = in_value(n, 0);
        const std::size_t c = a.cols();
        for (std::size_t r = 0; r < a.rows(); ++r) {
          const T* x = a.data() + r * c;
          T* o = y + r * c;
          T mx = *std::max_element(x, x + c);
          T total{};
          for (std::size_t j = 0; j < c; ++j) total += (o[j] = std::exp(x[j] - mx));
          for (std::size_t j = 0; j < c; ++j) o[j] /= total;
        }
        break;
      }
      case Op::kLayerNorm: {
        const TensorT& x = in_value(n, 0);
        const TensorT& g = in_value(n, 1);
        const TensorT& b = in_value(n, 2);
        const std::size_t c = x.cols(), rows = x.rows();
        n.saved.assign(2 * rows, T{});
        for (std::size_t r = 0; r < rows; ++r) {
          const T* xr = x.data() + r * c;
          T mu{};
          for (std::size_t j = 0; j < c; ++j) mu += xr[j];
          mu /= static_cast<T>(c);
          T var{};
          for (std::size_t j = 0; j < c; ++j) var += (xr[j] - mu) * (xr[j] - mu);
          var /= static_cast<T>(c);
          const T rstd = T{1} / std::sqrt(var + static_cast<T>(kLayerNormEps));
          n.saved[2 * r] = mu;
          n.saved[2 * r + 1] = rstd;
          for (std::size_t j = 0; j < c; ++j) y[r * c + j] = (xr[j] - mu) * rstd * g[j] + b[j];
        }
        break;
      }
      case Op::kGelu: {
        const TensorT& a = in_value(n, 0);
        for (std::size_t i = 0; i < a.size(); ++i) y[i] = gelu_value(a[i]);
        break;
      }
      case Op::kGather: {
        const TensorT& t = in_value(n, 0);
        const std::size_t c = t.cols();
        for (std::size_t r = 0; r < n.indices.size(); ++r)
          std::copy_n(t.data() + static_cast<std::size_t>(n.indices[r]) * c, c, y + r * c);
        break;
      }
      case Op::kGatherMean: {
        const TensorT& t = in_value(n, 0);
        const std::size_t c = t.cols();
        for (std::size_t s = 0; s + 1 < n.offsets.size(); ++s) {
          T* o = y + s * c;
          for (std::size_t p = n.offsets[s]; p < n.offsets[s + 1]; ++p)
            kernel::axpy(T{1}, t.data() + static_cast<std::size_t>(n.indices[p]) * c, o, c);
          const T inv = T{1} / static_cast<T>(n.offsets[s + 1] - n.offsets[s]);
          for (std::size_t j = 0; j < c; ++j) o[j] *= inv;
        }
        break;
      }
      case Op::kMean: {
        const TensorT& a = in_value(n, 0);
        if (a.rank() == 1) {
          double acc = 0;
          for (T v : a.values()) acc += v;
          y[0] = static_cast<T>(acc / static_cast<double>(a.size()));
        } else if (n.axis == 0) {
          const std::size_t rows = a.dim(0), c = a.dim(1);
          for (std::size_t r = 0; r < rows; ++r) kernel::axpy(T{1}, a.data() + r * c, y, c);
          for (std::size_t j = 0; j < c; ++j) y[j] /= static_cast<T>(rows);
        } else {
          const std::size_t rows = a.dim(0), c = a.dim(1);
          for (std::size_t r = 0; r < rows; ++r) {
            T acc{};
            for (std::size_t j = 0; j < c; ++j) acc += a[r * c + j];
            y[r] = acc / static_cast<T>(c);
          }
        }
        break;
      }
      case Op::kConcat: {
        const std::size_t out_c = n.shape[1];
        std::size_t offset = 0;
        for (std::size_t k = 0; k < n.in.size(); ++k) {
          const TensorT& a = in_value(n, k);
          if (n.axis == 0) {
            std::copy(a.data(), a.data() + a.size(), y + offset);
            offset += a.size();
          } else {
            const std::size_t c = a.dim(1);
            for (std::size_t r = 0; r < a.dim(0); ++r) std::copy_n(a.data() + r * c, c, y + r * out_c + offset);
            offset += c;
          }
        }
        break;
      }
      case Op::kCausalMask: {
        const TensorT& a = in_value(n, 0);
        const std::size_t m = a.dim(0);
        const T mask = static_cast<T>(kMaskValue);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < m; ++j) y[i * m + j] = a[i * m + j] + (j > i ? mask : T{});
        break;
      }
      case Op::kDot: {
        const TensorT& a = in_value(n, 0);
        const TensorT& b = in_value(n, 1);
        const std::size_t c = a.cols();
        for (std::size_t r = 0; r < a.rows(); ++r) y[r] = kernel::dot(a.data() + r * c, b.data() + r * c, c);
        break;
      }
      case Op::kReshape: {
        const TensorT& a = in_value(n, 0);
        std::copy(a.data(), a.data() + a.size(), y);
        break;
      }
      case Op::kCrossEntropy: {
        const TensorT& a = in_value(n, 0);
        const std::size_t c = a.cols();
        n.saved.assign(a.rows(), T{});
        for (std::size_t r = 0; r < a.rows(); ++r) {
          const T* x = a.data() + r * c;
          const double mx = *std::max_element(x, x + c);
          double total = 0;
          for (std::size_t j = 0; j < c; ++j) total += std::exp(static_cast<double>(x[j]) - mx);
          const double lse = mx + std::log(total);
          n.saved[r] = static_cast<T>(lse);
          y[r] = static_cast<T>(lse - static_cast<double>(x[static_cast<std::size_t>(n.indices[r])]));
        }
        break;
      }
      case Op::kSum: {
        const TensorT& a = in_value(n, 0);
        double acc = 0;
        for (T v : a.values()) acc += v;
        y[0] = static_cast<T>(acc);
        break;
      }
      default:
        break;
    }
    n.value = std::move(out);
  }

  void backward_node(int id) {
    // Copy what we need: grad_buffer() may reallocate other nodes' storage
    // but never this node's vector slot, so references into nodes_ stay valid.
    Node& n = nodes_[static_cast<std::size_t>(id)];
    const TensorT& dy = n.grad;
    const T* g = dy.data();
    switch (n.op) {
      case Op::kMatMul: {
        const TensorT& a = in_value(n, 0);
        const TensorT& b = in_value(n, 1);
        const std::size_t m = a.dim(0), k = a.dim(1), cols = n.shape[1];
        if (wants_grad(n, 0)) {
          T* da = grad_buffer(n.in[0]).data();
          if (n.flag)
            kernel::gemm_nn(g, b.data(), da, m, cols, k);
          else
            kernel::gemm_nt(g, b.data(), da, m, cols, k);
        }
        if (wants_grad(n, 1)) {
          T* db = grad_buffer(n.in[1]).data();
          if (n.flag)
            kernel::gemm_tn(g, a.data(), db, m, cols, k);
          else
            kernel::gemm_tn(a.data(), g, db, m, k, cols);
        }
        break;
      }
      case Op::kAdd: {
        if (wants_grad(n, 0)) {
          T* da = grad_buffer(n.in[0]).data();
          for (std::size_t i = 0; i < dy.size(); ++i) da[i] += g[i];
        }
        if (wants_grad(n, 1)) {
          T* db = grad_buffer(n.in[1]).data();
          if (!n.flag) {
            for (std::size_t i = 0; i < dy.size(); ++i) db[i] += g[i];
          } else {
            const std::size_t c = dy.cols();
            for (std::size_t r = 0; r < dy.rows(); ++r) kernel::axpy(T{1}, g + r * c, db, c);
          }
        }
        break;
      }
      case Op::kMultiply: {
        const TensorT& a = in_value(n, 0);
        const TensorT& b = in_value(n, 1);
        if (wants_grad(n, 0)) {
          T* da = grad_buffer(n.in[0]).data();
          for (std::size_t i = 0; i < dy.size(); ++i) da[i] += g[i] * b[i];
        }
        if (wants_grad(n, 1)) {
          T* db = grad_buffer(n.in[1]).data();
          for (std::size_t i = 0; i < dy.size(); ++i) db[i] += g[i] * a[i];
        }
        break;
      }
      case Op::kScale: {
        T* da = grad_buffer(n.in[0]).data();
        for (std::size_t i = 0; i < dy.size(); ++i) da[i] += g[i] * n.scalar;
        break;
      }
      case Op::kSoftmax: {
        const T* p = n.value.data();
        T* da = grad_buffer(n.in[0]).data();
        const std::size_t c = dy.cols();
        for (std::size_t r = 0; r < dy.rows(); ++r) {
          const T s = kernel::dot(g + r * c, p + r * c, c);
          for (std::size_t j = 0; j < c; ++j) da[r * c + j] += p[r * c + j] * (g[r * c + j] - s);
        }
        break;
      }
      case Op::kLayerNorm: {
        const TensorT& x = in_value(n, 0);
        const TensorT& gain = in_value(n, 1);
        const std::size_t c = x.cols(), rows = x.rows();
        T* dx = wants_grad(n, 0) ? grad_buffer(n.in[0]).data() : nullptr;
        T* dg = wants_grad(n, 1) ? grad_buffer(n.in[1]).data() : nullptr;
        T* db = wants_grad(n, 2) ? grad_buffer(n.in[2]).data() : nullptr;
        std::vector<T> xhat(c), dxhat(c);
        for (std::size_t r = 0; r < rows; ++r) {
          const T mu = n.saved[2 * r], rstd = n.saved[2 * r + 1];
          const T* xr = x.data() + r * c;
          const T* gr = g + r * c;
          T mean_d{}, mean_dx{};
          for (std::size_t j = 0; j < c; ++j) {
            xhat[j] = (xr[j] - mu) * rstd;
            dxhat[j] = gr[j] * gain[j];
            mean_d += dxhat[j];
            mean_dx += dxhat[j] * xhat[j];
          }
          mean_d /= static_cast<T>(c);
          mean_dx /= static_cast<T>(c);
          if (dx)
            for (std::size_t j = 0; j < c; ++j) dx[r * c + j] += rstd * (dxhat[j] - mean_d - xhat[j] * mean_dx);
          if (dg)
            for (std::size_t j = 0; j < c; ++j) dg[j] += gr[j] * xhat[j];
          if (db)
            for (std::size_t j = 0; j < c; ++j) db[j] += gr[j];
        }
        break;
      }
      case Op::kGelu: {
        const TensorT& a = in_value(n, 0);
        T* da = grad_buffer(n.in[0]).data();
        for (std::size_t i = 0; i < dy.size(); ++i) da[i] += g[i] * gelu_derivative(a[i]);
        break;
      }
      case Op::kGather: {
        TensorT& dt = grad_buffer(n.in[0]);
        const std::size_t c = dt.cols();
        for (std::size_t r = 0; r < n.indices.size(); ++r)
          kernel::axpy(T{1}, g + r * c, dt.data() + static_cast<std::size_t>(n.indices[r]) * c, c);
        break;
      }
      case Op::kGatherMean: {
        TensorT& dt = grad_buffer(n.in[0]);
        const std::size_t c = dt.cols();
        for (std::size_t s = 0; s + 1 < n.offsets.size(); ++s) {
          const T inv = T{1} / static_cast<T>(n.offsets[s + 1] - n.offsets[s]);
          for (std::size_t p = n.offsets[s]; p < n.offsets[s + 1]; ++p)
            kernel::axpy(inv, g + s * c, dt.data() + static_cast<std::size_t>(n.indices[p]) * c, c);
        }
        break;
      }
      case Op::kMean: {
        TensorT& da = grad_buffer(n.in[0]);
        if (da.rank() == 1) {
          const T share = g[0] / static_cast<T>(da.size());
          for (T& v : da.values()) v += share;
        } else if (n.axis == 0) {
          const std::size_t rows = da.dim(0), c = da.dim(1);
          const T inv = T{1} / static_cast<T>(rows);
          for (std::size_t r = 0; r < rows; ++r) kernel::axpy(inv, g, da.data() + r * c, c);
        } else {
          const std::size_t rows = da.dim(0), c = da.dim(1);
          for (std::size_t r = 0; r < rows; ++r) {
            const T share = g[r] / static_cast<T>(c);
            for (std::size_t j = 0; j < c; ++j) da[r * c + j] += share;
          }
        }
        break;
      }
      case Op::kConcat: {
        const std::size_t out_c = n.shape[1];
        std::size_t offset = 0;
        for (std::size_t k = 0; k < n.in.size(); ++k) {
          const Shape& s = nodes_[static_cast<std::size_t>(n.in[k])].shape;
          const std::size_t part = shape_size(s);
          if (wants_grad(n, k)) {
            T* da = grad_buffer(n.in[k]).data();
            if (n.axis == 0) {
              for (std::size_t i = 0; i < part; ++i) da[i] += g[offset + i];
            } else {
              const std::size_t c = s[1];
              for (std::size_t r = 0; r < s[0]; ++r)
                for (std::size_t j = 0; j < c; ++j) da[r * c + j] += g[r * out_c + offset + j];
            }
          }
          offset += n.axis == 0 ? part : s[1];
        }
        break;
      }
      case Op::kCausalMask:
      case Op::kReshape: {
        T* da = grad_buffer(n.in[0]).data();
        for (std::size_t i = 0; i < dy.size(); ++i) da[i] += g[i];
        break;
      }
      case Op::kDot: {
        const TensorT& a = in_value(n, 0);
        const TensorT& b = in_value(n, 1);
        const std::size_t c = a.cols();
        if (wants_grad(n, 0)) {
          T* da = grad_buffer(n.in[0]).data();
          for (std::size_t r = 0; r < a.rows(); ++r) kernel::axpy(g[r], b.data() + r * c, da + r * c, c);
        }
        if (wants_grad(n, 1)) {
          T* db = grad_buffer(n.in[1]).data();
          for (std::size_t r = 0; r < a.rows(); ++r) kernel::axpy(g[r], a.data() + r * c, db + r * c, c);
        }
        break;
      }
      case Op::kCrossEntropy: {
        const TensorT& a = in_value(n, 0);
        T* da = grad_buffer(n.in[0]).data();
        const std::size_t c = a.cols();
        for (std::size_t r = 0; r < a.rows(); ++r) {
          const double lse = n.saved[r];
          for (std::size_t j = 0; j < c; ++j) {
            const double p = std::exp(static_cast<double>(a[r * c + j]) - lse);
            da[r * c + j] += static_cast<T>(g[r] * p);
          }
          da[r * c + static_cast<std::size_t>(n.indices[r])] -= g[r];
        }
        break;
      }
      case Op::kSum: {
        T* da = grad_buffer(n.in[0]).data();
        const std::size_t count = shape_size(nodes_[static_cast<std::size_t>(n.in[0])].shape);
        for (std::size_t i = 0; i < count; ++i) da[i] += g[0];
        break;
      }
      default:
        break;
    }
  }

  static T gelu_value(T x) {
    constexpr T k = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
    constexpr T c = static_cast<T>(0.044715);
    return T{0.5} * x * (T{1} + std::tanh(k * (x + c * x * x * x)));
  }

  static T gelu_derivative(T x) {
    constexpr T k = static_cast<T>(0.7978845608028654);
    constexpr T c = static_cast<T>(0.044715);
    const T t = std::tanh(k * (x + c * x * x * x));
    return T{0.5} * (T{1} + t) + T{0.5} * x * (T{1} - t * t) * k * (T{1} + T{3} * c * x * x);
  }

  std::vector<Node> nodes_;
  bool forwarded_ = false;
  bool backpropagated_ = false;
};

using Graph = BasicGraph<float>;

}  // namespace seqrec
