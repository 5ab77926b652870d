#include "d2dmoe/autodiff.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <string>
#include <utility>

#include "d2dmoe/linalg.hpp"

namespace d2dmoe::ad {

namespace {

thread_local bool t_grad_enabled = true;
thread_local bool t_finite_check = false;

template <class Real>
using RowMat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class Real>
using MatMap = Eigen::Map<RowMat<Real>>;
template <class Real>
using ConstMatMap = Eigen::Map<const RowMat<Real>>;
using Stride = Eigen::OuterStride<>;
template <class Real>
using BlockMap = Eigen::Map<RowMat<Real>, 0, Stride>;
template <class Real>
using ConstBlockMap = Eigen::Map<const RowMat<Real>, 0, Stride>;

template <class Real>
ConstMatMap<Real> as_mat(const Tensor<Real>& t) {
  return ConstMatMap<Real>(t.ptr(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}
template <class Real>
MatMap<Real> as_mat(Tensor<Real>& t) {
  return MatMap<Real>(t.ptr(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}

}  // namespace

std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string_view op_name(OpKind kind) {
  switch (kind) {
    case OpKind::matmul: return "matmul";
    case OpKind::add: return "add";
    case OpKind::mul: return "mul";
    case OpKind::add_bias: return "add_bias";
    case OpKind::relu: return "relu";
    case OpKind::gelu: return "gelu";
    case OpKind::abs: return "abs";
    case OpKind::max_reduce: return "max_reduce";
    case OpKind::sum_reduce: return "sum_reduce";
    case OpKind::square: return "square";
    case OpKind::div: return "div";
    case OpKind::layernorm: return "layernorm";
    case OpKind::softmax: return "softmax";
    case OpKind::embedding_lookup: return "embedding_lookup";
    case OpKind::cross_entropy: return "cross_entropy";
    case OpKind::mse: return "mse";
    case OpKind::l2_norm_rows: return "l2_norm_rows";
    case OpKind::attention: return "attention";
    case OpKind::bce_with_logits: return "bce_with_logits";
  }
  return "unknown";
}

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

bool finite_check_enabled() { return t_finite_check; }

FiniteCheckGuard::FiniteCheckGuard(bool enabled) : previous_(t_finite_check) { t_finite_check = enabled; }
FiniteCheckGuard::~FiniteCheckGuard() { t_finite_check = previous_; }

// ---------------------------------------------------------------------------
// Kernels

// Output columns are computed in fixed-width panels so that a column's value
// does not depend on how many other columns the product has (Eigen picks its
// micro-kernel by width). Keeps x [W, -W] column-for-column equal to x W.
inline constexpr std::size_t kGemmPanel = 16;

template <class Real>
void gemm(const Real* a, const Real* b, Real* c, std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
  using Row = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using Stride = Eigen::OuterStride<>;
  const auto em = static_cast<Eigen::Index>(m);
  const auto ek = static_cast<Eigen::Index>(k);
  ConstMatMap<Real> A(a, em, ek);
  for (std::size_t j = 0; j < n; j += kGemmPanel) {
    const auto w = static_cast<Eigen::Index>(std::min(kGemmPanel, n - j));
    Eigen::Map<const Row, 0, Stride> B(b + j, ek, w, Stride(static_cast<Eigen::Index>(n)));
    Eigen::Map<Row, 0, Stride> C(c + j, em, w, Stride(static_cast<Eigen::Index>(n)));
    if (accumulate) {
      C.noalias() += A * B;
    } else {
      C.noalias() = A * B;
    }
  }
}

template <class Real>
Tensor<Real> mm(const Tensor<Real>& a, const Tensor<Real>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows()) {
    throw DimensionError("matmul: cannot multiply " + shape_str(a.shape()) + " by " + shape_str(b.shape()));
  }
  Tensor<Real> out(Shape{a.rows(), b.cols()});
  gemm(a.ptr(), b.ptr(), out.ptr(), a.rows(), a.cols(), b.cols(), false);
  return out;
}

template <class Real>
void add_bias_rows(Tensor<Real>& x, const Tensor<Real>& bias) {
  if (x.rank() != 2 || bias.numel() != x.cols()) {
    throw DimensionError("add_bias: bias " + shape_str(bias.shape()) + " does not fit " + shape_str(x.shape()));
  }
  const std::size_t n = x.cols();
  for (std::size_t r = 0; r < x.rows(); ++r) {
    Real* row = x.ptr() + r * n;
    for (std::size_t j = 0; j < n; ++j) row[j] += bias[j];
  }
}

// ---------------------------------------------------------------------------
// Graph nodes

namespace detail {

template <class Real>
struct Node {
  Tensor<Real> value;
  Tensor<Real> grad;
  bool has_grad = false;
  bool requires_grad = false;
  bool is_leaf = false;
  std::size_t leaf_id = std::numeric_limits<std::size_t>::max();
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;
  std::weak_ptr<TapeStore<Real>> tape;

  Tensor<Real>& grad_buffer() {
    if (!has_grad) {
      grad = Tensor<Real>(value.shape());
      has_grad = true;
    }
    return grad;
  }
};

template <class Real>
struct TapeStore {
  std::vector<std::shared_ptr<Node<Real>>> ops;
  std::vector<std::shared_ptr<Node<Real>>> leaves;
};

}  // namespace detail

template <class Real>
const Tensor<Real>& Var<Real>::value() const {
  if (!node_) throw ContractError("use of an empty Var");
  return node_->value;
}

template <class Real>
bool Var<Real>::requires_grad() const {
  return node_ && node_->requires_grad;
}

template <class Real>
bool Var<Real>::is_leaf() const {
  return node_ && node_->is_leaf;
}

template <class Real>
std::size_t Var<Real>::leaf_id() const {
  if (!is_leaf()) throw ContractError("leaf_id() on a non-leaf Var");
  return node_->leaf_id;
}

template <class Real>
Var<Real> constant(Tensor<Real> value) {
  auto node = std::make_shared<detail::Node<Real>>();
  node->value = std::move(value);
  return Var<Real>(std::move(node));
}

template <class Real>
const Tensor<Real>& GradientMap<Real>::operator[](const Var<Real>& leaf) const {
  if (!leaf.is_leaf() || !leaf.requires_grad()) {
    throw ContractError("gradient lookup for a Var that is not a trainable leaf");
  }
  return grads_.at(leaf.leaf_id());
}

template <class Real>
Tape<Real>::Tape() : store_(std::make_shared<detail::TapeStore<Real>>()) {}

template <class Real>
Tape<Real>::~Tape() = default;

template <class Real>
Var<Real> Tape<Real>::leaf(Tensor<Real> value, bool requires_grad) {
  auto node = std::make_shared<detail::Node<Real>>();
  node->value = std::move(value);
  node->is_leaf = true;
  if (requires_grad) {
    node->requires_grad = true;
    node->tape = store_;
    node->leaf_id = store_->leaves.size();
    store_->leaves.push_back(node);
  }
  return Var<Real>(std::move(node));
}

template <class Real>
std::size_t Tape<Real>::num_ops() const {
  return store_->ops.size();
}

template <class Real>
std::size_t Tape<Real>::num_leaves() const {
  return store_->leaves.size();
}

// ---------------------------------------------------------------------------
// Op implementations

namespace {

template <class Real>
using NodeT = detail::Node<Real>;
template <class Real>
using Backward = std::function<void(NodeT<Real>&)>;

template <class Real>
struct OpResult {
  Tensor<Real> value;
  Backward<Real> backward;
};

// Gradient buffer of input i, or nullptr when that input needs none.
template <class Real>
Tensor<Real>* input_grad(NodeT<Real>& self, std::size_t i) {
  auto& in = self.inputs[i];
  return in->requires_grad ? &in->grad_buffer() : nullptr;
}

template <class Real>
const Tensor<Real>& input_value(const NodeT<Real>& self, std::size_t i) {
  return self.inputs[i]->value;
}

[[noreturn]] void shape_error(OpKind kind, const std::string& detail) {
  throw DimensionError(std::string(op_name(kind)) + ": " + detail);
}

template <class Real>
void require_rank2(OpKind kind, const Tensor<Real>& t, const char* what) {
  if (t.rank() != 2) shape_error(kind, std::string(what) + " must be rank 2, got " + shape_str(t.shape()));
}

template <class Real>
void require_same(OpKind kind, const Tensor<Real>& a, const Tensor<Real>& b) {
  if (a.shape() != b.shape()) {
    shape_error(kind, "shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

template <class Real, class F, class G>
OpResult<Real> unary(const Tensor<Real>& x, F f, G df) {
  Tensor<Real> out(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) out[i] = f(x[i]);
  Backward<Real> bw = [df](NodeT<Real>& self) {
    Tensor<Real>* gx = input_grad(self, 0);
    if (!gx) return;
    const Tensor<Real>& xv = input_value(self, 0);
    for (std::size_t i = 0; i < xv.numel(); ++i) (*gx)[i] += self.grad[i] * df(xv[i], self.value[i]);
  };
  return {std::move(out), std::move(bw)};
}

template <class Real>
OpResult<Real> op_matmul(const Tensor<Real>& a, const Tensor<Real>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows()) {
    shape_error(OpKind::matmul, "cannot multiply " + shape_str(a.shape()) + " by " + shape_str(b.shape()));
  }
  Tensor<Real> out = mm(a, b);
  Backward<Real> bw = [](NodeT<Real>& self) {
    const auto A = as_mat(input_value(self, 0));
    const auto B = as_mat(input_value(self, 1));
    const auto G = as_mat(std::as_const(self.grad));
    if (Tensor<Real>* ga = input_grad(self, 0)) as_mat(*ga).noalias() += G * B.transpose();
    if (Tensor<Real>* gb = input_grad(self, 1)) as_mat(*gb).noalias() += A.transpose() * G;
  };
  return {std::move(out), std::move(bw)};
}

template <class Real>
OpResult<Real> op_add(const Tensor<Real>& a, const Tensor<Real>& b) {
  require_same(OpKind::add, a, b);
  Tensor<Real> out(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] + b[i];
  Backward<Real> bw = [](NodeT<Real>& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (Tensor<Real>* g = input_grad(self, k)) {
        for (std::size_t i = 0; i < g->numel(); ++i) (*g)[i] += self.grad[i];
      }
    }
  };
  return {std::move(out), std::move(bw)};
}

template <class Real>
OpResult<Real> op_mul(const Tensor<Real>& a, const Tensor<Real>& b) {
  require_same(OpKind::mul, a, b);
  Tensor<Real> out(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] * b[i];
  Backward<Real> bw = [](NodeT<Real>& self) {
    const Tensor<Real>& av = input_value(self, 0);
    const Tensor<Real>& bv = input_value(self, 1);
    if (Tensor<Real>* ga = input_grad(self, 0)) {
      for (std::size_t i = 0; i < ga->numel(); ++i) (*ga)[i] += self.grad[i] * bv[i];
    }
    if (Tensor<Real>* gb = input_grad(self, 1)) {
      for (std::size_t i = 0; i < gb->numel(); ++i) (*gb)[i] += self.grad[i] * av[i];
    }
  };
  return {std::move(out), std::move(bw)};
}

template <class Real>
OpResult<Real> op_add_bias(const Tensor<Real>& x, const Tensor<Real>& b) {
  require_rank2(OpKind::add_bias, x, "input");
  if (b.rank() != 1 || b.dim(0) != x.cols()) {
    shape_error(OpKind::add_bias, "bias " + shape_str(b.shape()) + " does not fit " + shape_str(x.shape()));
  }
  Tensor<Real> out = x;
  add_bias_rows(out, b);
  Backward<Real> bw = [](NodeT<Real>& self) {
    if (Tensor<Real>* gx = input_grad(self, 0)) {
      for (std::size_t i = 0; i < gx->numel(); ++i) (*gx)[i] += self.grad[i];
    }
    if (Tensor<Real>* gb = input_grad(self, 1)) {
      const std::size_t n = gb->numel();
      for (std::size_t r = 0; r < self.grad.rows(); ++r) {
        for (std::size_t j = 0; j < n; ++j) (*gb)[j] += self.grad[r * n + j];
      }
    }
  };
  return {std::move(out), std::move(bw)};
}

template <class Real>
OpResult<Real> op_reduce(OpKind kind, const Tensor<Real>& x, const OpAttrs& attrs) {
  const bool is_max = kind == OpKind::max_reduce;
  const Real scale = is_max ? Real(1) : static_cast<Real>(attrs.scale);
  if (attrs.axis == Axis::all) {
    std::size_t arg = 0;
    Real acc = is_max ? x[0] : Real(0);
    for (std::size_t i = 0; i < x.numel(); ++i) {
      if (is_max) {
        if (x[i] > acc) {
          acc = x[i];
          arg = i;
        }
      } else {
        acc += x[i];
      }
    }
    Tensor<Real> out = Tensor<Real>::scalar(acc * scale);
    Backward<Real> bw = [is_max, arg, scale](NodeT<Real>& self) {
      Tensor<Real>* gx = input_grad(self, 0);
      if (!gx) return;
      const Real g = self.grad[0];
      if (is_max) {
        (*gx)[arg] += g;
      } else {
        for (std::size_t i = 0; i < gx->numel(); ++i) (*gx)[i] += g * scale;
      }
    };
    return {std::move(out), std::move(bw)};
  }
  require_rank2(kind, x, "input");
  const std::size_t m = x.rows();
  const std::size_t n = x.cols();
  Tensor<Real> out(Shape{m});
  std::vector<std::size_t> args(is_max ? m : 0);
  for (std::size_t r = 0; r < m; ++r) {
    const Real* row = x.ptr() + r * n;
    if (is_max) {
      std::size_t arg = 0;
      for (std::size_t j = 1; j < n; ++j) {
        if (row[j] > row[arg]) arg = j;
      }
      args[r] = arg;
      out[r] = row[arg];
    } else {
      Real acc = 0;
      for (std::size_t j = 0; j < n; ++j) acc += row[j];
      out[r] = acc * scale;
    }
  }
  Backward<Real> bw = [is_max, args = std::move(args), scale, n](NodeT<Real>& self) {
    Tensor<Real>* gx = input_grad(self, 0);
    if (!gx) return;
    for (std::size_t r = 0; r < self.grad.numel(); ++r) {
      if (is_max) {
        (*gx)[r * n + args[r]] += self.grad[r];
      } else {
        for (std::size_t j = 0; j < n; ++j) (*gx)[r * n + j] += self.grad[r] * scale;
      }
    }
  };
  return {std::move(out), std::move(bw)};
}

template <class Real>
OpResult<Real> op_div(const Tensor<Real>& a, const Tensor<Real>& b) {
  require_same(OpKind::div, a, b);
  Tensor<Real> out(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] / b[i];
  Backward<Real> bw = [](NodeT<Real>& self) {
    const Tensor<Real>& av = input_value(self, 0);
    const Tensor<Real>& bv = input_value(self, 1);
    if (Tensor<Real>* ga = input_grad(self, 0)) {
      for (std::size_t i = 0; i < ga->numel(); ++i) (*ga)[i] += self.grad[i] / bv[i];
    }
    if (Tensor<Real>* gb = input_grad(self, 1)) {
      for (std::size_t i = 0; i < gb->numel(); ++i) (*gb)[i] -= self.grad[i] * av[i] / (bv[i] * bv[i]);
    }
  };
  return {std::move(out), std::move(bw)};
}

template <class Real>
OpResult<Real> op_layernorm(const Tensor<Real>& x, const Tensor<Real>& gamma, const Tensor<Real>& beta,
                            double eps_attr) {
  require_rank2(OpKind::layernorm, x, "input");
  const std::size_t m = x.rows();
  const std::size_t n = x.cols();
  if (gamma.rank() != 1 || gamma.dim(0) != n || beta.shape() != gamma.shape()) {
    shape_error(OpKind::layernorm, "gamma/beta " + shape_str(gamma.shape()) + "/" + shape_str(beta.shape()) +
                                       " do not fit " + shape_str(x.shape()));
  }
  const Real eps = static_cast<Real>(eps_attr);
  Tensor<Real> out(x.shape());
  Tensor<Real> xhat(x.shape());
  std::vector<Real> rstd(m);
  for (std::size_t r = 0; r < m; ++r) {
    const Real* row = x.ptr() + r * n;
    Real mean = 0;
    for (std::size_t j = 0; j < n; ++j) mean += row[j];
    mean /= static_cast<Real>(n);
    Real var = 0;
    for (std::size_t j = 0; j < n; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<Real>(n);
    rstd[r] = Real(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      const Real h = (row[j] - mean) * rstd[r];
      xhat[r * n + j] = h;
      out[r * n + j] = h * gamma[j] + beta[j];
    }
  }
  Backward<Real> bw = [xhat = std::move(xhat), rstd = std::move(rstd), m, n](NodeT<Real>& self) {
    const Tensor<Real>& gam = input_value(self, 1);
    const Tensor<Real>& g = self.grad;
    if (Tensor<Real>* gg = input_grad(self, 1)) {
      for (std::size_t r = 0; r < m; ++r)
        for (std::size_t j = 0; j < n; ++j) (*gg)[j] += g[r * n + j] * xhat[r * n + j];
    }
    if (Tensor<Real>* gb = input_grad(self, 2)) {
      for (std::size_t r = 0; r < m; ++r)
        for (std::size_t j = 0; j < n; ++j) (*gb)[j] += g[r * n + j];
    }
    if (Tensor<Real>* gx = input_grad(self, 0)) {
      std::vector<Real> dxhat(n);
      for (std::size_t r = 0; r < m; ++r) {
        Real mean_d = 0;
        Real mean_dx = 0;
        for (std::size_t j = 0; j < n; ++j) {
          dxhat[j] = g[r * n + j] * gam[j];
          mean_d += dxhat[j];
          mean_dx += dxhat[j] * xhat[r * n + j];
        }
        mean_d /= static_cast<Real>(n);
        mean_dx /= static_cast<Real>(n);
        for (std::size_t j = 0; j < n; ++j) {
          (*gx)[r * n + j] += rstd[r] * (dxhat[j] - mean_d - xhat[r * n + j] * mean_dx);
        }
      }
    }
  };
  return {std::move(out), std::move(bw)};
}

template <class Real>
void softmax_row(const Real* in, Real* out, std::size_t n) {
  Real mx = in[0];
  for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, in[j]);
  Real s = 0;
  for (std::size_t j = 0; j < n; ++j) {
    out[j] = std::exp(in[j] - mx);
    s += out[j];
  }
  for (std::size_t j = 0; j < n; ++j) out[j] /= s;
}

template <class Real>
OpResult<Real> op_softmax(const Tensor<Real>& x) {
  require_rank2(OpKind::softmax, x, "input");
  const std::size_t m = x.rows();
  const std::size_t n = x.cols();
  Tensor<Real> out(x.shape());
  for (std::size_t r = 0; r < m; ++r) softmax_row(x.ptr() + r * n, out.ptr() + r * n, n);
  Backward<Real> bw = [m, n](NodeT<Real>& self) {
    Tensor<Real>* gx = input_grad(self, 0);
    if (!gx) return;
    for (std::size_t r = 0; r < m; ++r) {
      const Real* y = self.value.ptr() + r * n;
      const Real* g = self.grad.ptr() + r * n;
      Real dot = 0;
      for (std::size_t j = 0; j < n; ++j) dot += g[j] * y[j];
      for (std::size_t j = 0; j < n; ++j) (*gx)[r * n + j] += y[j] * (g[j] - dot);
    }
  };
  return {std::move(out), std::move(bw)};
}

template <class Real>
OpResult<Real> op_embedding(const Tensor<Real>& table, const std::vector<int>& ids) {
  require_rank2(OpKind::embedding_lookup, table, "table");
  if (ids.empty()) shape_error(OpKind::embedding_lookup, "no indices");
  const std::size_t d = table.cols();
  Tensor<Real> out(Shape{ids.size(), d});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= table.rows()) {
      throw InputError("embedding_lookup: index " + std::to_string(ids[i]) + " out of range for table " +
                       shape_str(table.shape()));
    }
    std::copy_n(table.ptr() + static_cast<std::size_t>(ids[i]) * d, d, out.ptr() + i * d);
  }
  Backward<Real> bw = [ids, d](NodeT<Real>& self) {
    Tensor<Real>* gt = input_grad(self, 0);
    if (!gt) return;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      Real* dst = gt->ptr() + static_cast<std::size_t>(ids[i]) * d;
      const Real* src = self.grad.ptr() + i * d;
      for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
    }
  };
  return {std::move(out), std::move(bw)};
}

template <class Real>
OpResult<Real> op_cross_entropy(const Tensor<Real>& logits, const std::vector<int>& targets) {
  require_rank2(OpKind::cross_entropy, logits, "logits");
  const std::size_t m = logits.rows();
  const std::size_t n = logits.cols();
  if (targets.size() != m) {
    shape_error(OpKind::cross_entropy, std::to_string(targets.size()) + " targets for logits " +
                                           shape_str(logits.shape()));
  }
  Tensor<Real> probs(logits.shape());
  Real loss = 0;
  for (std::size_t r = 0; r < m; ++r) {
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= n) {
      throw InputError("cross_entropy: target " + std::to_string(targets[r]) + " out of range for " +
                       std::to_string(n) + " classes");
    }
    const Real* row = logits.ptr() + r * n;
    softmax_row(row, probs.ptr() + r * n, n);
    Real mx = row[0];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    Real s = 0;
    for (std::size_t j = 0; j < n; ++j) s += std::exp(row[j] - mx);
    loss += (std::log(s) + mx) - row[targets[r]];
  }
  Tensor<Real> out = Tensor<Real>::scalar(loss / static_cast<Real>(m));
  Backward<Real> bw = [probs = std::move(probs), targets, m, n](NodeT<Real>& self) {
    Tensor<Real>* gx = input_grad(self, 0);
    if (!gx) return;
    const Real g = self.grad[0] / static_cast<Real>(m);
    for (std::size_t r = 0; r < m; ++r) {
      for (std::size_t j = 0; j < n; ++j) {
        const Real onehot = static_cast<std::size_t>(targets[r]) == j ? Real(1) : Real(0);
        (*gx)[r * n + j] += g * (probs[r * n + j] - onehot);
      }
    }
  };
  return {std::move(out), std::move(bw)};
}

template <class Real>
OpResult<Real> op_mse(const Tensor<Real>& a, const Tensor<Real>& b) {
  require_same(OpKind::mse, a, b);
  const auto count = static_cast<Real>(a.numel());
  Real acc = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) acc += (a[i] - b[i]) * (a[i] - b[i]);
  Tensor<Real> out = Tensor<Real>::scalar(acc / count);
  Backward<Real> bw = [count](NodeT<Real>& self) {
    const Tensor<Real>& av = input_value(self, 0);
    const Tensor<Real>& bv = input_value(self, 1);
    const Real g = self.grad[0] * Real(2) / count;
    if (Tensor<Real>* ga = input_grad(self, 0)) {
      for (std::size_t i = 0; i < ga->numel(); ++i) (*ga)[i] += g * (av[i] - bv[i]);
    }
    if (Tensor<Real>* gb = input_grad(self, 1)) {
      for (std::size_t i = 0; i < gb->numel(); ++i) (*gb)[i] -= g * (av[i] - bv[i]);
    }
  };
  return {std::move(out), std::move(bw)};
}

template <class Real>
OpResult<Real> op_l2_norm_rows(const Tensor<Real>& x) {
  require_rank2(OpKind::l2_norm_rows, x, "input");
  const std::size_t m = x.rows();
  const std::size_t n = x.cols();
  Tensor<Real> out(Shape{m});
  for (std::size_t r = 0; r < m; ++r) {
    Real s = 0;
    for (std::size_t j = 0; j < n; ++j) s += x[r * n + j] * x[r * n + j];
    out[r] = std::sqrt(s);
  }
  Backward<Real> bw = [m, n](NodeT<Real>& self) {
    Tensor<Real>* gx = input_grad(self, 0);
    if (!gx) return;
    const Tensor<Real>& xv = input_value(self, 0);
    for (std::size_t r = 0; r < m; ++r) {
      const Real norm = self.value[r];
      if (norm == Real(0)) continue;
      for (std::size_t j = 0; j < n; ++j) (*gx)[r * n + j] += self.grad[r] * xv[r * n + j] / norm;
    }
  };
  return {std::move(out), std::move(bw)};
}

template <class Real>
OpResult<Real> op_attention(const Tensor<Real>& q, const Tensor<Real>& k, const Tensor<Real>& v,
                            const AttentionAttrs& at) {
  require_rank2(OpKind::attention, q, "query");
  require_same(OpKind::attention, q, k);
  require_same(OpKind::attention, q, v);
  const std::size_t rows = q.rows();
  const std::size_t dm = q.cols();
  if (at.batch * at.seq != rows || at.heads == 0 || dm % at.heads != 0) {
    shape_error(OpKind::attention, "batch " + std::to_string(at.batch) + " x seq " + std::to_string(at.seq) +
                                       " with " + std::to_string(at.heads) + " heads does not fit " +
                                       shape_str(q.shape()));
  }
  const auto T = static_cast<Eigen::Index>(at.seq);
  const auto dh = static_cast<Eigen::Index>(dm / at.heads);
  const auto D = static_cast<Eigen::Index>(dm);
  const Real scale = Real(1) / std::sqrt(static_cast<Real>(dh));
  const std::size_t tt = at.seq * at.seq;
  std::vector<Real> probs(at.batch * at.heads * tt);
  Tensor<Real> out(q.shape());
  RowMat<Real> scores(T, T);
  for (std::size_t b = 0; b < at.batch; ++b) {
    for (std::size_t h = 0; h < at.heads; ++h) {
      const std::size_t off = b * at.seq * dm + h * static_cast<std::size_t>(dh);
      ConstBlockMap<Real> Q(q.ptr() + off, T, dh, Stride(D));
      ConstBlockMap<Real> K(k.ptr() + off, T, dh, Stride(D));
      ConstBlockMap<Real> V(v.ptr() + off, T, dh, Stride(D));
      scores.noalias() = Q * K.transpose();
      scores *= scale;
      if (at.causal) {
        for (Eigen::Index i = 0; i < T; ++i)
          for (Eigen::Index j = i + 1; j < T; ++j) scores(i, j) = -std::numeric_limits<Real>::infinity();
      }
      Real* P = probs.data() + (b * at.heads + h) * tt;
      for (Eigen::Index i = 0; i < T; ++i) softmax_row(scores.data() + i * T, P + i * T, at.seq);
      MatMap<Real> Pm(P, T, T);
      BlockMap<Real> O(out.ptr() + off, T, dh, Stride(D));
      O.noalias() = Pm * V;
    }
  }
  Backward<Real> bw = [probs = std::move(probs), at, T, dh, D, scale, tt](NodeT<Real>& self) {
    Tensor<Real>* gq = input_grad(self, 0);
    Tensor<Real>* gk = input_grad(self, 1);
    Tensor<Real>* gv = input_grad(self, 2);
    const Tensor<Real>& qv = input_value(self, 0);
    const Tensor<Real>& kv = input_value(self, 1);
    const Tensor<Real>& vv = input_value(self, 2);
    RowMat<Real> dP(T, T);
    for (std::size_t b = 0; b < at.batch; ++b) {
      for (std::size_t h = 0; h < at.heads; ++h) {
        const std::size_t off = b * at.seq * static_cast<std::size_t>(D) + h * static_cast<std::size_t>(dh);
        ConstBlockMap<Real> dO(self.grad.ptr() + off, T, dh, Stride(D));
        ConstBlockMap<Real> Q(qv.ptr() + off, T, dh, Stride(D));
        ConstBlockMap<Real> K(kv.ptr() + off, T, dh, Stride(D));
        ConstBlockMap<Real> V(vv.ptr() + off, T, dh, Stride(D));
        ConstMatMap<Real> P(probs.data() + (b * at.heads + h) * tt, T, T);
        if (gv) {
          BlockMap<Real> dV(gv->ptr() + off, T, dh, Stride(D));
          dV.noalias() += P.transpose() * dO;
        }
        if (!gq && !gk) continue;
        dP.noalias() = dO * V.transpose();
        for (Eigen::Index i = 0; i < T; ++i) {
          Real dot = 0;
          for (Eigen::Index j = 0; j < T; ++j) dot += dP(i, j) * P(i, j);
          for (Eigen::Index j = 0; j < T; ++j) dP(i, j) = P(i, j) * (dP(i, j) - dot) * scale;
        }
        if (gq) {
          BlockMap<Real> dQ(gq->ptr() + off, T, dh, Stride(D));
          dQ.noalias() += dP * K;
        }
        if (gk) {
          BlockMap<Real> dK(gk->ptr() + off, T, dh, Stride(D));
          dK.noalias() += dP.transpose() * Q;
        }
      }
    }
  };
  return {std::move(out), std::move(bw)};
}

template <class Real>
OpResult<Real> op_bce_with_logits(const Tensor<Real>& x, const Tensor<Real>& t) {
  require_same(OpKind::bce_with_logits, x, t);
  const auto count = static_cast<Real>(x.numel());
  Real acc = 0;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    acc += std::max(x[i], Real(0)) - x[i] * t[i] + std::log1p(std::exp(-std::abs(x[i])));
  }
  Tensor<Real> out = Tensor<Real>::scalar(acc / count);
  Backward<Real> bw = [count](NodeT<Real>& self) {
    const Tensor<Real>& xv = input_value(self, 0);
    const Tensor<Real>& tv = input_value(self, 1);
    const Real g = self.grad[0] / count;
    if (Tensor<Real>* gx = input_grad(self, 0)) {
      for (std::size_t i = 0; i < gx->numel(); ++i) {
        const Real sig = Real(1) / (Real(1) + std::exp(-xv[i]));
        (*gx)[i] += g * (sig - tv[i]);
      }
    }
    if (Tensor<Real>* gt = input_grad(self, 1)) {
      for (std::size_t i = 0; i < gt->numel(); ++i) (*gt)[i] -= g * xv[i];
    }
  };
  return {std::move(out), std::move(bw)};
}

std::size_t arity(OpKind kind) {
  switch (kind) {
    case OpKind::matmul:
    case OpKind::add:
    case OpKind::mul:
    case OpKind::add_bias:
    case OpKind::div:
    case OpKind::mse:
    case OpKind::bce_with_logits:
      return 2;
    case OpKind::layernorm:
    case OpKind::attention:
      return 3;
    default:
      return 1;
  }
}

template <class Real>
OpResult<Real> dispatch(OpKind kind, const std::vector<const Tensor<Real>*>& in, const OpAttrs& attrs) {
  switch (kind) {
    case OpKind::matmul: return op_matmul(*in[0], *in[1]);
    case OpKind::add: return op_add(*in[0], *in[1]);
    case OpKind::mul: return op_mul(*in[0], *in[1]);
    case OpKind::add_bias: return op_add_bias(*in[0], *in[1]);
    case OpKind::relu:
      return unary(*in[0], [](Real x) { return x > Real(0) ? x : Real(0); },
                   [](Real x, Real) { return x > Real(0) ? Real(1) : Real(0); });
    case OpKind::gelu:
      return unary(*in[0], [](Real x) { return gelu_scalar(x); }, [](Real x, Real) { return gelu_grad_scalar(x); });
    case OpKind::abs:
      return unary(*in[0], [](Real x) { return std::abs(x); },
                   [](Real x, Real) { return x > Real(0) ? Real(1) : (x < Real(0) ? Real(-1) : Real(0)); });
    case OpKind::square:
      return unary(*in[0], [](Real x) { return x * x; }, [](Real x, Real) { return Real(2) * x; });
    case OpKind::max_reduce:
    case OpKind::sum_reduce: return op_reduce(kind, *in[0], attrs);
    case OpKind::div: return op_div(*in[0], *in[1]);
    case OpKind::layernorm: return op_layernorm(*in[0], *in[1], *in[2], attrs.eps);
    case OpKind::softmax: return op_softmax(*in[0]);
    case OpKind::embedding_lookup: return op_embedding(*in[0], attrs.indices);
    case OpKind::cross_entropy: return op_cross_entropy(*in[0], attrs.indices);
    case OpKind::mse: return op_mse(*in[0], *in[1]);
    case OpKind::l2_norm_rows: return op_l2_norm_rows(*in[0]);
    case OpKind::attention: return op_attention(*in[0], *in[1], *in[2], attrs.attention);
    case OpKind::bce_with_logits: return op_bce_with_logits(*in[0], *in[1]);
  }
  throw ContractError("unknown op kind");
}

}  // namespace

template <class Real>
Var<Real> forward_op(OpKind kind, std::span<const Var<Real>> inputs, const OpAttrs& attrs) {
  if (inputs.size() != arity(kind)) {
    throw ContractError(std::string(op_name(kind)) + ": expected " + std::to_string(arity(kind)) + " inputs, got " +
                        std::to_string(inputs.size()));
  }
  std::vector<const Tensor<Real>*> values;
  values.reserve(inputs.size());
  std::shared_ptr<detail::TapeStore<Real>> store;
  for (const Var<Real>& in : inputs) {
    if (!in.valid()) throw ContractError(std::string(op_name(kind)) + ": empty input");
    values.push_back(&in.node_->value);
    if (!grad_enabled() || !in.node_->requires_grad) continue;
    auto owner = in.node_->tape.lock();
    if (!owner) throw ContractError(std::string(op_name(kind)) + ": input belongs to a destroyed tape");
    if (store && store != owner) throw ContractError(std::string(op_name(kind)) + ": inputs from different tapes");
    store = std::move(owner);
  }

  OpResult<Real> result = dispatch<Real>(kind, values, attrs);
  if (finite_check_enabled() && !result.value.all_finite()) {
    throw NumericError(std::string(op_name(kind)) + ": non-finite output");
  }

  auto node = std::make_shared<detail::Node<Real>>();
  node->value = std::move(result.value);
  if (store) {
    node->requires_grad = true;
    node->tape = store;
    node->backward = std::move(result.backward);
    node->inputs.reserve(inputs.size());
    for (const Var<Real>& in : inputs) node->inputs.push_back(in.node_);
    store->ops.push_back(node);
  }
  return Var<Real>(std::move(node));
}

template <class Real>
GradientMap<Real> backward(Tape<Real>& tape, const Var<Real>& loss) {
  if (!loss.valid()) throw ContractError("backward: empty loss");
  if (loss.value().numel() != 1) {
    throw ContractError("backward: loss must be a scalar, got shape " + shape_str(loss.value().shape()));
  }
  auto& store = *tape.store_;
  if (!loss.node_->requires_grad || loss.node_->tape.lock() != tape.store_) {
    throw ContractError("backward: loss was not produced on this tape");
  }
  for (auto& n : store.ops) n->has_grad = false;
  for (auto& n : store.leaves) n->has_grad = false;
  loss.node_->grad_buffer().fill(Real(1));
  for (auto it = store.ops.rbegin(); it != store.ops.rend(); ++it) {
    detail::Node<Real>& node = **it;
    if (node.has_grad && node.backward) node.backward(node);
  }
  std::vector<Tensor<Real>> grads;
  grads.reserve(store.leaves.size());
  for (auto& leaf : store.leaves) {
    grads.push_back(leaf->has_grad ? leaf->grad : Tensor<Real>(leaf->value.shape()));
  }
  return GradientMap<Real>(std::move(grads));
}

#define D2DMOE_INSTANTIATE(Real)                                                                          \
  template class Var<Real>;                                                                               \
  template class Tape<Real>;                                                                              \
  template class GradientMap<Real>;                                                                       \
  template Var<Real> constant<Real>(Tensor<Real>);                                                        \
  template Var<Real> forward_op<Real>(OpKind, std::span<const Var<Real>>, const OpAttrs&);               \
  template GradientMap<Real> backward<Real>(Tape<Real>&, const Var<Real>&);                              \
  template Tensor<Real> mm<Real>(const Tensor<Real>&, const Tensor<Real>&);                              \
  template void gemm<Real>(const Real*, const Real*, Real*, std::size_t, std::size_t, std::size_t, bool); \
  template void add_bias_rows<Real>(Tensor<Real>&, const Tensor<Real>&);

D2DMOE_INSTANTIATE(float)
D2DMOE_INSTANTIATE(double)

#undef D2DMOE_INSTANTIATE

}  // namespace d2dmoe::ad
