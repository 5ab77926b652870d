#pragma once

#include <array>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <span>
#include <string_view>
#include <vector>

#include "d2dmoe/tensor.hpp"

// Reverse-mode automatic differentiation over a fixed operation set.
//
// Values flow through Var handles. A Var created with Tape::leaf() is a
// trainable parameter; ops whose inputs require gradients are recorded on
// that tape in execution order, so a reverse sweep of the tape is a valid
// topological order for backward(). With gradient mode off (NoGradGuard) or
// when no input requires gradients nothing is recorded and the op only
// computes its value.
namespace d2dmoe::ad {

enum class OpKind {
  matmul,
  add,
  mul,
  add_bias,
  relu,
  gelu,
  abs,
  max_reduce,
  sum_reduce,
  square,
  div,
  layernorm,
  softmax,
  embedding_lookup,
  cross_entropy,
  mse,
  l2_norm_rows,
  // Multi-head scaled dot-product attention over packed (batch*seq, d) rows.
  attention,
  // Mean binary cross-entropy on logits against [0, 1] targets.
  bce_with_logits,
};

inline constexpr std::array<OpKind, 19> kAllOps = {
    OpKind::matmul,        OpKind::add,         OpKind::mul,           OpKind::add_bias,
    OpKind::relu,          OpKind::gelu,        OpKind::abs,           OpKind::max_reduce,
    OpKind::sum_reduce,    OpKind::square,      OpKind::div,           OpKind::layernorm,
    OpKind::softmax,       OpKind::embedding_lookup, OpKind::cross_entropy, OpKind::mse,
    OpKind::l2_norm_rows,  OpKind::attention,   OpKind::bce_with_logits,
};

std::string_view op_name(OpKind kind);

// Reduction axis: `all` collapses to a scalar, `rows` reduces every row of a
// rank-2 tensor to one value (result has shape {rows}).
enum class Axis { all, rows };

struct AttentionAttrs {
  std::size_t batch = 1;
  std::size_t seq = 1;
  std::size_t heads = 1;
  bool causal = false;
};

struct OpAttrs {
  Axis axis = Axis::all;
  double scale = 1.0;        // sum_reduce multiplier
  double eps = 1e-5;         // layernorm
  std::vector<int> indices;  // embedding rows / cross-entropy targets
  AttentionAttrs attention;
};

namespace detail {
template <class Real>
struct Node;
template <class Real>
struct TapeStore;
}  // namespace detail

template <class Real>
class Tape;
template <class Real>
class GradientMap;
template <class Real>
class Var;
template <class Real>
GradientMap<Real> backward(Tape<Real>& tape, const Var<Real>& loss);

template <class Real>
class Var {
 public:
  Var() = default;

  bool valid() const { return node_ != nullptr; }
  const Tensor<Real>& value() const;
  const Shape& shape() const { return value().shape(); }
  // True when a gradient flows to this value (leaf marked trainable, or
  // derived from one while recording).
  bool requires_grad() const;
  bool is_leaf() const;
  std::size_t leaf_id() const;

 private:
  explicit Var(std::shared_ptr<detail::Node<Real>> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::Node<Real>> node_;

  template <class R>
  friend Var<R> forward_op(OpKind, std::span<const Var<R>>, const OpAttrs&);
  template <class R>
  friend Var<R> constant(Tensor<R>);
  friend class Tape<Real>;
  template <class R>
  friend class GradientMap;
  template <class R>
  friend GradientMap<R> backward(Tape<R>&, const Var<R>&);
};

// A value that never receives gradients.
template <class Real>
Var<Real> constant(Tensor<Real> value);

template <class Real>
class GradientMap {
 public:
  GradientMap() = default;
  explicit GradientMap(std::vector<Tensor<Real>> grads) : grads_(std::move(grads)) {}

  const Tensor<Real>& operator[](const Var<Real>& leaf) const;
  const Tensor<Real>& at(std::size_t leaf_id) const { return grads_.at(leaf_id); }
  std::size_t size() const { return grads_.size(); }

 private:
  std::vector<Tensor<Real>> grads_;
};

template <class Real>
class Tape {
 public:
  Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  ~Tape();

  // Registers a leaf. Leaves with requires_grad are the keys of the
  // gradient map returned by backward().
  Var<Real> leaf(Tensor<Real> value, bool requires_grad = true);

  std::size_t num_ops() const;
  std::size_t num_leaves() const;

 private:
  std::shared_ptr<detail::TapeStore<Real>> store_;

  template <class R>
  friend GradientMap<R> backward(Tape<R>&, const Var<R>&);
};

// Gradient of a scalar loss with respect to every requires_grad leaf of the
// tape. Leaves the loss does not depend on get zero tensors.
template <class Real>
GradientMap<Real> backward(Tape<Real>& tape, const Var<Real>& loss);

// Thread-local gradient mode.
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Thread-local finite check: when on, every op verifies its output and
// throws NumericError naming the op on NaN/Inf.
bool finite_check_enabled();

class FiniteCheckGuard {
 public:
  explicit FiniteCheckGuard(bool enabled);
  ~FiniteCheckGuard();
  FiniteCheckGuard(const FiniteCheckGuard&) = delete;
  FiniteCheckGuard& operator=(const FiniteCheckGuard&) = delete;

 private:
  bool previous_;
};

template <class Real>
Var<Real> forward_op(OpKind kind, std::span<const Var<Real>> inputs, const OpAttrs& attrs = {});

template <class Real>
Var<Real> forward_op(OpKind kind, std::initializer_list<Var<Real>> inputs, const OpAttrs& attrs = {}) {
  std::vector<Var<Real>> v(inputs);
  return forward_op<Real>(kind, std::span<const Var<Real>>(v), attrs);
}

// Convenience wrappers.
template <class Real>
Var<Real> matmul(const Var<Real>& a, const Var<Real>& b) {
  return forward_op<Real>(OpKind::matmul, {a, b});
}
template <class Real>
Var<Real> add(const Var<Real>& a, const Var<Real>& b) {
  return forward_op<Real>(OpKind::add, {a, b});
}
template <class Real>
Var<Real> mul(const Var<Real>& a, const Var<Real>& b) {
  return forward_op<Real>(OpKind::mul, {a, b});
}
template <class Real>
Var<Real> add_bias(const Var<Real>& x, const Var<Real>& b) {
  return forward_op<Real>(OpKind::add_bias, {x, b});
}
template <class Real>
Var<Real> relu(const Var<Real>& x) {
  return forward_op<Real>(OpKind::relu, {x});
}
template <class Real>
Var<Real> gelu(const Var<Real>& x) {
  return forward_op<Real>(OpKind::gelu, {x});
}
template <class Real>
Var<Real> abs(const Var<Real>& x) {
  return forward_op<Real>(OpKind::abs, {x});
}
template <class Real>
Var<Real> square(const Var<Real>& x) {
  return forward_op<Real>(OpKind::square, {x});
}
template <class Real>
Var<Real> div(const Var<Real>& a, const Var<Real>& b) {
  return forward_op<Real>(OpKind::div, {a, b});
}
template <class Real>
Var<Real> sum(const Var<Real>& x, Axis axis = Axis::all, double scale = 1.0) {
  OpAttrs attrs;
  attrs.axis = axis;
  attrs.scale = scale;
  return forward_op<Real>(OpKind::sum_reduce, {x}, attrs);
}
template <class Real>
Var<Real> max(const Var<Real>& x, Axis axis = Axis::all) {
  OpAttrs attrs;
  attrs.axis = axis;
  return forward_op<Real>(OpKind::max_reduce, {x}, attrs);
}
template <class Real>
Var<Real> layernorm(const Var<Real>& x, const Var<Real>& gamma, const Var<Real>& beta, double eps = 1e-5) {
  OpAttrs attrs;
  attrs.eps = eps;
  return forward_op<Real>(OpKind::layernorm, {x, gamma, beta}, attrs);
}
template <class Real>
Var<Real> softmax(const Var<Real>& x) {
  return forward_op<Real>(OpKind::softmax, {x});
}
template <class Real>
Var<Real> embedding(const Var<Real>& table, std::vector<int> ids) {
  OpAttrs attrs;
  attrs.indices = std::move(ids);
  return forward_op<Real>(OpKind::embedding_lookup, {table}, attrs);
}
template <class Real>
Var<Real> cross_entropy(const Var<Real>& logits, std::vector<int> targets) {
  OpAttrs attrs;
  attrs.indices = std::move(targets);
  return forward_op<Real>(OpKind::cross_entropy, {logits}, attrs);
}
template <class Real>
Var<Real> mse(const Var<Real>& a, const Var<Real>& b) {
  return forward_op<Real>(OpKind::mse, {a, b});
}
template <class Real>
Var<Real> l2_norm_rows(const Var<Real>& x) {
  return forward_op<Real>(OpKind::l2_norm_rows, {x});
}
template <class Real>
Var<Real> attention(const Var<Real>& q, const Var<Real>& k, const Var<Real>& v, AttentionAttrs shape) {
  OpAttrs attrs;
  attrs.attention = shape;
  return forward_op<Real>(OpKind::attention, {q, k, v}, attrs);
}
template <class Real>
Var<Real> bce_with_logits(const Var<Real>& logits, const Var<Real>& targets) {
  return forward_op<Real>(OpKind::bce_with_logits, {logits, targets});
}

}  // namespace d2dmoe::ad
