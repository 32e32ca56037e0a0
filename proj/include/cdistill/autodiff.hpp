#pragma once

// Reverse-mode differentiation over dense tensors.
//
// A Tape records every op applied to its Vars. Tapes are explicit, single-owner
// objects: create one per forward/backward cycle and discard it afterwards.
// Parameters live outside tapes so their gradients accumulate across tapes
// (gradient accumulation) until zero_grad() is called.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "cdistill/error.hpp"
#include "cdistill/tensor.hpp"

namespace cdistill {

using NodeId = std::size_t;

template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;

  Parameter() = default;
  Parameter(std::string n, Tensor<T> v) : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}

  void zero_grad() {
    if (grad.shape() != value.shape()) grad = Tensor<T>(value.shape());
    grad.fill(T{0});
  }
};

template <typename T>
class Tape;

/// Handle to a node on a tape.
template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  NodeId id = 0;

  bool valid() const noexcept { return tape != nullptr; }
  const Tensor<T>& value() const { return tape->value(*this); }
  const Shape& shape() const { return value().shape(); }
};

template <typename T>
class Tape {
 public:
  /// Everything a backward rule may read. grad_in(i) is null when input i needs no gradient.
  struct BackwardArgs {
    const Tape& tape;
    std::span<const NodeId> inputs;
    const Tensor<T>& out;
    const Tensor<T>& grad;
    std::span<Tensor<T>* const> grads_in;

    const Tensor<T>& in(std::size_t i) const { return tape.value_of(inputs[i]); }
    Tensor<T>* grad_in(std::size_t i) const { return grads_in[i]; }
  };
  using BackwardFn = std::function<void(const BackwardArgs&)>;

  explicit Tape(bool record_grad = true) : record_(record_grad) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const noexcept { return record_; }
  std::size_t size() const noexcept { return nodes_.size(); }

  Var<T> constant(Tensor<T> value) {
    Node n;
    n.op = "constant";
    n.value = std::move(value);
    return push(std::move(n));
  }

  /// Independent variable owned by the tape; its gradient accumulates across backward calls.
  Var<T> leaf(Tensor<T> value) {
    Node n;
    n.op = "leaf";
    n.leaf_grad = Tensor<T>(value.shape());
    n.value = std::move(value);
    n.is_leaf = true;
    n.requires_grad = record_;
    return push(std::move(n));
  }

  /// Binds a parameter. Values are read in place; gradients accumulate into p.grad.
  /// On a non-recording tape the parameter behaves as a constant.
  Var<T> param(Parameter<T>& p) {
    Node n;
    n.op = "param";
    n.external = &p.value;
    if (record_) {
      n.param = &p;
      n.is_leaf = true;
      n.requires_grad = true;
      if (p.grad.shape() != p.value.shape()) p.zero_grad();
    }
    return push(std::move(n));
  }

  /// Read-only parameter binding, independent of the recording mode.
  Var<T> param(const Parameter<T>& p) {
    Node n;
    n.op = "param";
    n.external = &p.value;
    return push(std::move(n));
  }

  /// Records the output of an op. Without recording, the backward rule is dropped.
  Var<T> record(const char* op, Tensor<T> value, std::initializer_list<Var<T>> inputs, BackwardFn fn) {
    return record(op, std::move(value), std::vector<Var<T>>(inputs), std::move(fn));
  }

  Var<T> record(const char* op, Tensor<T> value, const std::vector<Var<T>>& inputs, BackwardFn fn) {
    Node n;
    n.op = op;
    n.value = std::move(value);
    n.inputs.reserve(inputs.size());
    for (const auto& v : inputs) {
      check_owner(v, op);
      const NodeId id = resolve(v.id);
      ++nodes_[id].consumers;
      n.inputs.push_back(id);
      if (nodes_[id].requires_grad) n.requires_grad = true;
    }
    if (record_ && n.requires_grad) {
      n.backward = std::move(fn);
    } else {
      n.requires_grad = false;
    }
    return push(std::move(n));
  }

  const Tensor<T>& value(Var<T> v) const {
    check_owner(v, "value");
    return value_of(resolve(v.id));
  }

  const Tensor<T>& value_of(NodeId id) const {
    const Node& n = nodes_[id];
    return n.external ? *n.external : n.value;
  }

  bool requires_grad(Var<T> v) const { return nodes_[resolve(v.id)].requires_grad; }

  /// Follows activation overrides to the node consumers actually read.
  NodeId resolve(NodeId id) const {
    while (nodes_.at(id).redirect) id = *nodes_[id].redirect;
    return id;
  }

  /// Redirects all future consumers of `node` to `replacement`. Gradients then flow
  /// into the replacement's producers and never into the overridden node's.
  Var<T> override_activation(Var<T> node, Var<T> replacement) {
    check_owner(node, "override_activation");
    check_owner(replacement, "override_activation");
    const NodeId target = node.id;
    const NodeId repl = resolve(replacement.id);
    if (nodes_[target].redirect) {
      throw InterventionError("override_activation: node " + std::to_string(target) + " is already overridden");
    }
    if (value_of(target).shape() != value_of(repl).shape()) {
      throw ShapeError("override_activation: node shape " + to_string(value_of(target).shape()) +
                       " vs replacement shape " + to_string(value_of(repl).shape()));
    }
    if (nodes_[target].consumers > 0) {
      throw InterventionError("override_activation: node " + std::to_string(target) + " (" + nodes_[target].op +
                              ") was already consumed downstream; install overrides before running consumers");
    }
    if (repl != target) nodes_[target].redirect = repl;
    return node;
  }

  /// Backpropagates from a scalar root. Intermediate gradients are recomputed on
  /// each call; leaf and parameter gradients accumulate.
  void backward(Var<T> root) {
    check_owner(root, "backward");
    const NodeId r = resolve(root.id);
    if (value_of(r).size() != 1) {
      throw ShapeError("backward: root must be scalar, got shape " + to_string(value_of(r).shape()));
    }
    grads_.assign(nodes_.size(), Tensor<T>{});
    if (!nodes_[r].requires_grad) return;
    grads_[r] = Tensor<T>(value_of(r).shape(), T{1});

    std::vector<Tensor<T>*> slots;
    for (NodeId id = r + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (!n.requires_grad || grads_[id].empty()) continue;
      if (n.param) {
        accumulate(n.param->grad, grads_[id]);
        continue;
      }
      if (n.is_leaf) {
        accumulate(n.leaf_grad, grads_[id]);
        continue;
      }
      if (!n.backward) continue;
      slots.assign(n.inputs.size(), nullptr);
      for (std::size_t i = 0; i < n.inputs.size(); ++i) {
        const NodeId in = n.inputs[i];
        if (!nodes_[in].requires_grad) continue;
        if (grads_[in].empty()) grads_[in] = Tensor<T>(value_of(in).shape());
        slots[i] = &grads_[in];
      }
      n.backward(BackwardArgs{*this, n.inputs, value_of(id), grads_[id], slots});
    }
  }

  /// Gradient at a node: accumulated for leaves and parameters, last backward pass otherwise.
  Tensor<T> grad(Var<T> v) const {
    const NodeId id = resolve(v.id);
    const Node& n = nodes_[id];
    if (n.param) return n.param->grad;
    if (n.is_leaf) return n.leaf_grad;
    if (id < grads_.size() && !grads_[id].empty()) return grads_[id];
    return Tensor<T>(value_of(id).shape());
  }

  void zero_leaf_grads() {
    for (auto& n : nodes_) {
      if (n.is_leaf && !n.param) n.leaf_grad.fill(T{0});
    }
  }

  const std::string& op_name(Var<T> v) const { return nodes_[resolve(v.id)].op; }

 private:
  struct Node {
    std::string op;
    Tensor<T> value;
    const Tensor<T>* external = nullptr;
    std::vector<NodeId> inputs;
    BackwardFn backward;
    bool requires_grad = false;
    bool is_leaf = false;
    Parameter<T>* param = nullptr;
    Tensor<T> leaf_grad;
    std::size_t consumers = 0;
    std::optional<NodeId> redirect;
  };

  Var<T> push(Node n) {
    nodes_.push_back(std::move(n));
    return Var<T>{this, nodes_.size() - 1};
  }

  void check_owner(Var<T> v, const char* op) const {
    if (v.tape != this || v.id >= nodes_.size()) {
      throw InterventionError(std::string(op) + ": variable does not belong to this tape");
    }
  }

  static void accumulate(Tensor<T>& dst, const Tensor<T>& src) {
    if (dst.shape() != src.shape()) dst = Tensor<T>(src.shape());
    for (std::size_t i = 0; i < src.size(); ++i) dst[i] += src[i];
  }

  bool record_;
  std::deque<Node> nodes_;
  std::vector<Tensor<T>> grads_;
};

namespace detail {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMatrix<T>>;
template <typename T>
using StridedMap = Eigen::Map<RowMatrix<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using ConstStridedMap = Eigen::Map<const RowMatrix<T>, 0, Eigen::OuterStride<>>;

template <typename T>
MatMap<T> mat(Tensor<T>& t, std::size_t rows, std::size_t cols) {
  return MatMap<T>(t.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}
template <typename T>
ConstMatMap<T> mat(const Tensor<T>& t, std::size_t rows, std::size_t cols) {
  return ConstMatMap<T>(t.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

template <typename T>
Tape<T>& same_tape(const char* op, std::initializer_list<Var<T>> vars) {
  Tape<T>* tape = nullptr;
  for (const auto& v : vars) {
    if (!v.valid()) throw ShapeError(std::string(op) + ": invalid variable");
    if (tape && v.tape != tape) throw ShapeError(std::string(op) + ": operands live on different tapes");
    tape = v.tape;
  }
  return *tape;
}

[[noreturn]] inline void shape_mismatch(const char* op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + to_string(a) + " and " + to_string(b));
}

inline void require_rank2(const char* op, const Shape& s) {
  if (s.size() != 2) throw ShapeError(std::string(op) + ": expected a matrix, got shape " + to_string(s));
}

template <typename T>
void add_into(Tensor<T>* dst, const Tensor<T>& src, T scale = T{1}) {
  if (!dst) return;
  for (std::size_t i = 0; i < src.size(); ++i) (*dst)[i] += scale * src[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

/// [m,k] x [k,n] -> [m,n]
template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  auto& tape = detail::same_tape("matmul", {a, b});
  const auto& A = tape.value(a);
  const auto& B = tape.value(b);
  if (A.rank() != 2 || B.rank() != 2 || A.dim(1) != B.dim(0)) detail::shape_mismatch("matmul", A.shape(), B.shape());
  const std::size_t m = A.dim(0), k = A.dim(1), n = B.dim(1);
  Tensor<T> out({m, n});
  detail::mat(out, m, n).noalias() = detail::mat(A, m, k) * detail::mat(B, k, n);
  return tape.record("matmul", std::move(out), {a, b}, [m, k, n](const auto& args) {
    auto g = detail::mat(args.grad, m, n);
    if (auto* ga = args.grad_in(0)) detail::mat(*ga, m, k).noalias() += g * detail::mat(args.in(1), k, n).transpose();
    if (auto* gb = args.grad_in(1)) detail::mat(*gb, k, n).noalias() += detail::mat(args.in(0), m, k).transpose() * g;
  });
}

/// Adds a [d] bias to every row of an [n,d] matrix.
template <typename T>
Var<T> add_bias(Var<T> x, Var<T> bias) {
  auto& tape = detail::same_tape("add_bias", {x, bias});
  const auto& X = tape.value(x);
  const auto& B = tape.value(bias);
  if (X.rank() != 2 || B.rank() != 1 || B.dim(0) != X.dim(1)) detail::shape_mismatch("add_bias", X.shape(), B.shape());
  Tensor<T> out = X;
  const std::size_t n = X.dim(0), d = X.dim(1);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < d; ++c) out[r * d + c] += B[c];
  return tape.record("add_bias", std::move(out), {x, bias}, [n, d](const auto& args) {
    detail::add_into(args.grad_in(0), args.grad);
    if (auto* gb = args.grad_in(1)) {
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < d; ++c) (*gb)[c] += args.grad[r * d + c];
    }
  });
}

template <typename T>
Var<T> linear(Var<T> x, Var<T> weight, Var<T> bias) {
  return add_bias(matmul(x, weight), bias);
}

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  auto& tape = detail::same_tape("add", {a, b});
  const auto& A = tape.value(a);
  const auto& B = tape.value(b);
  if (A.shape() != B.shape()) detail::shape_mismatch("add", A.shape(), B.shape());
  Tensor<T> out = A;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += B[i];
  return tape.record("add", std::move(out), {a, b}, [](const auto& args) {
    detail::add_into(args.grad_in(0), args.grad);
    detail::add_into(args.grad_in(1), args.grad);
  });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  auto& tape = detail::same_tape("sub", {a, b});
  const auto& A = tape.value(a);
  const auto& B = tape.value(b);
  if (A.shape() != B.shape()) detail::shape_mismatch("sub", A.shape(), B.shape());
  Tensor<T> out = A;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= B[i];
  return tape.record("sub", std::move(out), {a, b}, [](const auto& args) {
    detail::add_into(args.grad_in(0), args.grad);
    detail::add_into(args.grad_in(1), args.grad, T{-1});
  });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  auto& tape = detail::same_tape("mul", {a, b});
  const auto& A = tape.value(a);
  const auto& B = tape.value(b);
  if (A.shape() != B.shape()) detail::shape_mismatch("mul", A.shape(), B.shape());
  Tensor<T> out = A;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= B[i];
  return tape.record("mul", std::move(out), {a, b}, [](const auto& args) {
    const auto& A = args.in(0);
    const auto& B = args.in(1);
    if (auto* ga = args.grad_in(0))
      for (std::size_t i = 0; i < A.size(); ++i) (*ga)[i] += args.grad[i] * B[i];
    if (auto* gb = args.grad_in(1))
      for (std::size_t i = 0; i < A.size(); ++i) (*gb)[i] += args.grad[i] * A[i];
  });
}

/// a * s + shift, elementwise.
template <typename T>
Var<T> affine(Var<T> a, T s, T shift = T{0}) {
  auto& tape = detail::same_tape("affine", {a});
  Tensor<T> out = tape.value(a);
  for (auto& v : out.values()) v = v * s + shift;
  return tape.record("affine", std::move(out), {a}, [s](const auto& args) { detail::add_into(args.grad_in(0), args.grad, s); });
}

template <typename T>
Var<T> scale(Var<T> a, T s) {
  return affine(a, s, T{0});
}

template <typename T>
Var<T> log(Var<T> a) {
  auto& tape = detail::same_tape("log", {a});
  Tensor<T> out = tape.value(a);
  for (auto& v : out.values()) v = std::log(v);
  return tape.record("log", std::move(out), {a}, [](const auto& args) {
    if (auto* g = args.grad_in(0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += args.grad[i] / args.in(0)[i];
  });
}

template <typename T>
Var<T> exp(Var<T> a) {
  auto& tape = detail::same_tape("exp", {a});
  Tensor<T> out = tape.value(a);
  for (auto& v : out.values()) v = std::exp(v);
  return tape.record("exp", std::move(out), {a}, [](const auto& args) {
    if (auto* g = args.grad_in(0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += args.grad[i] * args.out[i];
  });
}

/// Exact (erf-based) GELU.
template <typename T>
Var<T> gelu(Var<T> a) {
  auto& tape = detail::same_tape("gelu", {a});
  constexpr T kInvSqrt2 = T(0.70710678118654752440);
  Tensor<T> out = tape.value(a);
  for (auto& v : out.values()) v = T(0.5) * v * (T(1) + std::erf(v * kInvSqrt2));
  return tape.record("gelu", std::move(out), {a}, [](const auto& args) {
    constexpr T kInvSqrt2 = T(0.70710678118654752440);
    constexpr T kInvSqrt2Pi = T(0.39894228040143267794);
    if (auto* g = args.grad_in(0)) {
      const auto& X = args.in(0);
      for (std::size_t i = 0; i < X.size(); ++i) {
        const T x = X[i];
        const T cdf = T(0.5) * (T(1) + std::erf(x * kInvSqrt2));
        const T pdf = kInvSqrt2Pi * std::exp(T(-0.5) * x * x);
        (*g)[i] += args.grad[i] * (cdf + x * pdf);
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions

template <typename T>
Var<T> sum(Var<T> a) {
  auto& tape = detail::same_tape("sum", {a});
  T total{0};
  for (T v : tape.value(a).values()) total += v;
  return tape.record("sum", Tensor<T>::scalar(total), {a}, [](const auto& args) {
    if (auto* g = args.grad_in(0))
      for (auto& v : g->values()) v += args.grad[0];
  });
}

template <typename T>
Var<T> mean(Var<T> a) {
  const std::size_t n = a.value().size();
  if (n == 0) throw ShapeError("mean: empty tensor");
  return scale(sum(a), T(1) / static_cast<T>(n));
}

/// Mean of the elements whose mask entry is nonzero.
template <typename T>
Var<T> masked_mean(Var<T> a, std::span<const std::uint8_t> mask) {
  auto& tape = detail::same_tape("masked_mean", {a});
  const auto& A = tape.value(a);
  if (mask.size() != A.size()) {
    detail::shape_mismatch("masked_mean", A.shape(), Shape{mask.size()});
  }
  std::size_t count = 0;
  T total{0};
  for (std::size_t i = 0; i < A.size(); ++i) {
    if (mask[i]) {
      total += A[i];
      ++count;
    }
  }
  if (count == 0) throw ShapeError("masked_mean: empty index set");
  std::vector<std::uint8_t> m(mask.begin(), mask.end());
  const T inv = T(1) / static_cast<T>(count);
  return tape.record("masked_mean", Tensor<T>::scalar(total * inv), {a}, [m = std::move(m), inv](const auto& args) {
    if (auto* g = args.grad_in(0))
      for (std::size_t i = 0; i < m.size(); ++i)
        if (m[i]) (*g)[i] += args.grad[0] * inv;
  });
}

/// Inner product of two equally shaped tensors.
template <typename T>
Var<T> dot(Var<T> a, Var<T> b) {
  auto& tape = detail::same_tape("dot", {a, b});
  const auto& A = tape.value(a);
  const auto& B = tape.value(b);
  if (A.shape() != B.shape()) detail::shape_mismatch("dot", A.shape(), B.shape());
  T total{0};
  for (std::size_t i = 0; i < A.size(); ++i) total += A[i] * B[i];
  return tape.record("dot", Tensor<T>::scalar(total), {a, b}, [](const auto& args) {
    const T g = args.grad[0];
    if (auto* ga = args.grad_in(0))
      for (std::size_t i = 0; i < ga->size(); ++i) (*ga)[i] += g * args.in(1)[i];
    if (auto* gb = args.grad_in(1))
      for (std::size_t i = 0; i < gb->size(); ++i) (*gb)[i] += g * args.in(0)[i];
  });
}

/// Euclidean norm over all elements. The subgradient at zero is taken as zero.
template <typename T>
Var<T> norm(Var<T> a) {
  auto& tape = detail::same_tape("norm", {a});
  T ss{0};
  for (T v : tape.value(a).values()) ss += v * v;
  return tape.record("norm", Tensor<T>::scalar(std::sqrt(ss)), {a}, [](const auto& args) {
    const T n = args.out[0];
    if (n == T{0}) return;
    if (auto* g = args.grad_in(0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += args.grad[0] * args.in(0)[i] / n;
  });
}

/// Per-row inner products of two [n,d] matrices -> [n].
template <typename T>
Var<T> row_dot(Var<T> a, Var<T> b) {
  auto& tape = detail::same_tape("row_dot", {a, b});
  const auto& A = tape.value(a);
  const auto& B = tape.value(b);
  if (A.shape() != B.shape() || A.rank() != 2) detail::shape_mismatch("row_dot", A.shape(), B.shape());
  const std::size_t n = A.dim(0), d = A.dim(1);
  Tensor<T> out({n});
  for (std::size_t r = 0; r < n; ++r) {
    T s{0};
    for (std::size_t c = 0; c < d; ++c) s += A[r * d + c] * B[r * d + c];
    out[r] = s;
  }
  return tape.record("row_dot", std::move(out), {a, b}, [n, d](const auto& args) {
    for (std::size_t side = 0; side < 2; ++side) {
      auto* g = args.grad_in(side);
      if (!g) continue;
      const auto& other = args.in(1 - side);
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < d; ++c) (*g)[r * d + c] += args.grad[r] * other[r * d + c];
    }
  });
}

/// Per-row Euclidean norms of an [n,d] matrix -> [n].
template <typename T>
Var<T> row_norm(Var<T> a) {
  auto& tape = detail::same_tape("row_norm", {a});
  const auto& A = tape.value(a);
  detail::require_rank2("row_norm", A.shape());
  const std::size_t n = A.dim(0), d = A.dim(1);
  Tensor<T> out({n});
  for (std::size_t r = 0; r < n; ++r) {
    T s{0};
    for (std::size_t c = 0; c < d; ++c) s += A[r * d + c] * A[r * d + c];
    out[r] = std::sqrt(s);
  }
  return tape.record("row_norm", std::move(out), {a}, [n, d](const auto& args) {
    auto* g = args.grad_in(0);
    if (!g) return;
    for (std::size_t r = 0; r < n; ++r) {
      if (args.out[r] == T{0}) continue;
      const T k = args.grad[r] / args.out[r];
      for (std::size_t c = 0; c < d; ++c) (*g)[r * d + c] += k * args.in(0)[r * d + c];
    }
  });
}

/// Per-row cosine similarity of two [n,d] matrices -> [n]. Rows where either
/// vector has zero norm yield cosine 0 (and zero gradient); they are counted
/// into *zero_norm_rows when provided.
template <typename T>
Var<T> row_cosine(Var<T> a, Var<T> b, std::size_t* zero_norm_rows = nullptr) {
  auto& tape = detail::same_tape("row_cosine", {a, b});
  const auto& A = tape.value(a);
  const auto& B = tape.value(b);
  if (A.shape() != B.shape() || A.rank() != 2) detail::shape_mismatch("row_cosine", A.shape(), B.shape());
  const std::size_t n = A.dim(0), d = A.dim(1);
  Tensor<T> out({n});
  // Saved per row: |a|, |b|.
  auto norms = std::make_shared<std::vector<T>>(2 * n);
  for (std::size_t r = 0; r < n; ++r) {
    T ab{0}, aa{0}, bb{0};
    for (std::size_t c = 0; c < d; ++c) {
      const T x = A[r * d + c], y = B[r * d + c];
      ab += x * y;
      aa += x * x;
      bb += y * y;
    }
    const T na = std::sqrt(aa), nb = std::sqrt(bb);
    (*norms)[2 * r] = na;
    (*norms)[2 * r + 1] = nb;
    if (na == T{0} || nb == T{0}) {
      out[r] = T{0};
      if (zero_norm_rows) ++*zero_norm_rows;
    } else {
      out[r] = ab / (na * nb);
    }
  }
  return tape.record("row_cosine", std::move(out), {a, b}, [n, d, norms](const auto& args) {
    for (std::size_t r = 0; r < n; ++r) {
      const T na = (*norms)[2 * r], nb = (*norms)[2 * r + 1];
      if (na == T{0} || nb == T{0}) continue;
      const T cs = args.out[r];
      const T g = args.grad[r];
      // d cos / d a = b / (|a||b|) - cos * a / |a|^2
      for (std::size_t side = 0; side < 2; ++side) {
        auto* gi = args.grad_in(side);
        if (!gi) continue;
        const auto& self = args.in(side);
        const auto& other = args.in(1 - side);
        const T ns = side == 0 ? na : nb;
        for (std::size_t c = 0; c < d; ++c) {
          (*gi)[r * d + c] += g * (other[r * d + c] / (na * nb) - cs * self[r * d + c] / (ns * ns));
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Row-wise normalisations (last axis)

template <typename T>
Var<T> softmax(Var<T> a) {
  auto& tape = detail::same_tape("softmax", {a});
  Tensor<T> out = tape.value(a);
  const std::size_t d = out.cols(), n = out.rows();
  for (std::size_t r = 0; r < n; ++r) {
    auto row = out.row(r);
    const T mx = *std::max_element(row.begin(), row.end());
    T z{0};
    for (auto& v : row) z += (v = std::exp(v - mx));
    for (auto& v : row) v /= z;
  }
  return tape.record("softmax", std::move(out), {a}, [n, d](const auto& args) {
    auto* g = args.grad_in(0);
    if (!g) return;
    for (std::size_t r = 0; r < n; ++r) {
      T s{0};
      for (std::size_t c = 0; c < d; ++c) s += args.grad[r * d + c] * args.out[r * d + c];
      for (std::size_t c = 0; c < d; ++c) (*g)[r * d + c] += args.out[r * d + c] * (args.grad[r * d + c] - s);
    }
  });
}

template <typename T>
Var<T> log_softmax(Var<T> a) {
  auto& tape = detail::same_tape("log_softmax", {a});
  Tensor<T> out = tape.value(a);
  const std::size_t d = out.cols(), n = out.rows();
  for (std::size_t r = 0; r < n; ++r) {
    auto row = out.row(r);
    const T mx = *std::max_element(row.begin(), row.end());
    T z{0};
    for (T v : row) z += std::exp(v - mx);
    const T lse = mx + std::log(z);
    for (auto& v : row) v -= lse;
  }
  return tape.record("log_softmax", std::move(out), {a}, [n, d](const auto& args) {
    auto* g = args.grad_in(0);
    if (!g) return;
    for (std::size_t r = 0; r < n; ++r) {
      T s{0};
      for (std::size_t c = 0; c < d; ++c) s += args.grad[r * d + c];
      for (std::size_t c = 0; c < d; ++c) (*g)[r * d + c] += args.grad[r * d + c] - std::exp(args.out[r * d + c]) * s;
    }
  });
}

/// Normalises each row of an [n,d] matrix, then applies gamma/beta of shape [d].
template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps) {
  auto& tape = detail::same_tape("layer_norm", {x, gamma, beta});
  const auto& X = tape.value(x);
  const auto& G = tape.value(gamma);
  const auto& B = tape.value(beta);
  detail::require_rank2("layer_norm", X.shape());
  const std::size_t n = X.dim(0), d = X.dim(1);
  if (G.shape() != Shape{d}) detail::shape_mismatch("layer_norm", X.shape(), G.shape());
  if (B.shape() != Shape{d}) detail::shape_mismatch("layer_norm", X.shape(), B.shape());
  auto xhat = std::make_shared<Tensor<T>>(X.shape());
  auto inv_std = std::make_shared<std::vector<T>>(n);
  Tensor<T> out(X.shape());
  for (std::size_t r = 0; r < n; ++r) {
    T mu{0};
    for (std::size_t c = 0; c < d; ++c) mu += X[r * d + c];
    mu /= static_cast<T>(d);
    T var{0};
    for (std::size_t c = 0; c < d; ++c) {
      const T dv = X[r * d + c] - mu;
      var += dv * dv;
    }
    var /= static_cast<T>(d);
    const T is = T(1) / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t c = 0; c < d; ++c) {
      const T h = (X[r * d + c] - mu) * is;
      (*xhat)[r * d + c] = h;
      out[r * d + c] = h * G[c] + B[c];
    }
  }
  return tape.record("layer_norm", std::move(out), {x, gamma, beta}, [n, d, xhat, inv_std](const auto& args) {
    const auto& G = args.in(1);
    const auto& dy = args.grad;
    if (auto* gg = args.grad_in(1))
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < d; ++c) (*gg)[c] += dy[r * d + c] * (*xhat)[r * d + c];
    if (auto* gb = args.grad_in(2))
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < d; ++c) (*gb)[c] += dy[r * d + c];
    if (auto* gx = args.grad_in(0)) {
      for (std::size_t r = 0; r < n; ++r) {
        T m1{0}, m2{0};
        for (std::size_t c = 0; c < d; ++c) {
          const T dh = dy[r * d + c] * G[c];
          m1 += dh;
          m2 += dh * (*xhat)[r * d + c];
        }
        m1 /= static_cast<T>(d);
        m2 /= static_cast<T>(d);
        for (std::size_t c = 0; c < d; ++c) {
          const T dh = dy[r * d + c] * G[c];
          (*gx)[r * d + c] += (*inv_std)[r] * (dh - m1 - (*xhat)[r * d + c] * m2);
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Indexing

/// Rows of a [V,d] table selected by ids -> [n,d].
template <typename T>
Var<T> embedding(Var<T> table, std::span<const std::int32_t> ids) {
  auto& tape = detail::same_tape("embedding", {table});
  const auto& W = tape.value(table);
  detail::require_rank2("embedding", W.shape());
  const std::size_t vocab = W.dim(0), d = W.dim(1);
  Tensor<T> out({ids.size(), d});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw ShapeError("embedding: id " + std::to_string(ids[i]) + " outside table of shape " + to_string(W.shape()));
    }
    std::copy_n(W.data() + static_cast<std::size_t>(ids[i]) * d, d, out.data() + i * d);
  }
  std::vector<std::int32_t> idx(ids.begin(), ids.end());
  return tape.record("embedding", std::move(out), {table}, [idx = std::move(idx), d](const auto& args) {
    auto* g = args.grad_in(0);
    if (!g) return;
    for (std::size_t i = 0; i < idx.size(); ++i) {
      T* dst = g->data() + static_cast<std::size_t>(idx[i]) * d;
      for (std::size_t c = 0; c < d; ++c) dst[c] += args.grad[i * d + c];
    }
  });
}

/// Rows [begin, end) of a matrix.
template <typename T>
Var<T> slice_rows(Var<T> a, std::size_t begin, std::size_t end) {
  auto& tape = detail::same_tape("slice_rows", {a});
  const auto& A = tape.value(a);
  detail::require_rank2("slice_rows", A.shape());
  if (begin > end || end > A.dim(0)) {
    throw ShapeError("slice_rows: range [" + std::to_string(begin) + "," + std::to_string(end) + ") outside shape " +
                     to_string(A.shape()));
  }
  const std::size_t d = A.dim(1);
  Tensor<T> out({end - begin, d});
  std::copy_n(A.data() + begin * d, (end - begin) * d, out.data());
  return tape.record("slice_rows", std::move(out), {a}, [begin, d](const auto& args) {
    if (auto* g = args.grad_in(0))
      for (std::size_t i = 0; i < args.grad.size(); ++i) (*g)[begin * d + i] += args.grad[i];
  });
}

/// Stacks matrices with equal column counts along the row axis.
template <typename T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  Tape<T>& tape = *parts.front().tape;
  const std::size_t d = tape.value(parts.front()).cols();
  std::size_t rows = 0;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    if (p.tape != &tape) throw ShapeError("concat_rows: operands live on different tapes");
    const auto& P = tape.value(p);
    if (P.rank() != 2 || P.dim(1) != d) detail::shape_mismatch("concat_rows", tape.value(parts.front()).shape(), P.shape());
    offsets.push_back(rows);
    rows += P.dim(0);
  }
  Tensor<T> out({rows, d});
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const auto& P = tape.value(parts[i]);
    std::copy_n(P.data(), P.size(), out.data() + offsets[i] * d);
  }
  return tape.record("concat_rows", std::move(out), parts, [offsets, d](const auto& args) {
    for (std::size_t i = 0; i < offsets.size(); ++i) {
      if (auto* g = args.grad_in(i))
        for (std::size_t k = 0; k < g->size(); ++k) (*g)[k] += args.grad[offsets[i] * d + k];
    }
  });
}

/// Selected rows of a matrix, in the given order -> [k,d].
template <typename T>
Var<T> gather_rows(Var<T> a, std::span<const std::size_t> rows) {
  auto& tape = detail::same_tape("gather_rows", {a});
  const auto& A = tape.value(a);
  detail::require_rank2("gather_rows", A.shape());
  const std::size_t n = A.dim(0), d = A.dim(1);
  Tensor<T> out({rows.size(), d});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= n) throw ShapeError("gather_rows: row " + std::to_string(rows[i]) + " outside shape " + to_string(A.shape()));
    std::copy_n(A.data() + rows[i] * d, d, out.data() + i * d);
  }
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  return tape.record("gather_rows", std::move(out), {a}, [idx = std::move(idx), d](const auto& args) {
    auto* g = args.grad_in(0);
    if (!g) return;
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t c = 0; c < d; ++c) (*g)[idx[i] * d + c] += args.grad[i * d + c];
  });
}

/// Copy of `a` whose listed rows are replaced by the rows of `values`.
/// Replaced rows pass gradient to `values` only.
template <typename T>
Var<T> splice_rows(Var<T> a, std::span<const std::size_t> rows, Var<T> values) {
  auto& tape = detail::same_tape("splice_rows", {a, values});
  const auto& A = tape.value(a);
  const auto& V = tape.value(values);
  detail::require_rank2("splice_rows", A.shape());
  const std::size_t n = A.dim(0), d = A.dim(1);
  if (V.rank() != 2 || V.dim(0) != rows.size() || V.dim(1) != d) detail::shape_mismatch("splice_rows", A.shape(), V.shape());
  std::vector<std::uint8_t> replaced(n, 0);
  Tensor<T> out = A;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= n) throw ShapeError("splice_rows: row " + std::to_string(rows[i]) + " outside shape " + to_string(A.shape()));
    if (replaced[rows[i]]) throw ShapeError("splice_rows: row " + std::to_string(rows[i]) + " listed twice");
    replaced[rows[i]] = 1;
    std::copy_n(V.data() + i * d, d, out.data() + rows[i] * d);
  }
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  return tape.record("splice_rows", std::move(out), {a, values},
                     [idx = std::move(idx), replaced = std::move(replaced), d](const auto& args) {
                       if (auto* ga = args.grad_in(0)) {
                         for (std::size_t r = 0; r < replaced.size(); ++r) {
                           if (replaced[r]) continue;
                           for (std::size_t c = 0; c < d; ++c) (*ga)[r * d + c] += args.grad[r * d + c];
                         }
                       }
                       if (auto* gv = args.grad_in(1)) {
                         for (std::size_t i = 0; i < idx.size(); ++i)
                           for (std::size_t c = 0; c < d; ++c) (*gv)[i * d + c] += args.grad[idx[i] * d + c];
                       }
                     });
}

/// out[r] = a[r, cols[r]] for an [n,d] matrix -> [n].
template <typename T>
Var<T> pick(Var<T> a, std::span<const std::int32_t> cols) {
  auto& tape = detail::same_tape("pick", {a});
  const auto& A = tape.value(a);
  detail::require_rank2("pick", A.shape());
  const std::size_t n = A.dim(0), d = A.dim(1);
  if (cols.size() != n) detail::shape_mismatch("pick", A.shape(), Shape{cols.size()});
  Tensor<T> out({n});
  for (std::size_t r = 0; r < n; ++r) {
    if (cols[r] < 0 || static_cast<std::size_t>(cols[r]) >= d) {
      throw ShapeError("pick: column " + std::to_string(cols[r]) + " outside shape " + to_string(A.shape()));
    }
    out[r] = A[r * d + static_cast<std::size_t>(cols[r])];
  }
  std::vector<std::int32_t> idx(cols.begin(), cols.end());
  return tape.record("pick", std::move(out), {a}, [idx = std::move(idx), d](const auto& args) {
    if (auto* g = args.grad_in(0))
      for (std::size_t r = 0; r < idx.size(); ++r) (*g)[r * d + static_cast<std::size_t>(idx[r])] += args.grad[r];
  });
}

// ---------------------------------------------------------------------------
// Attention

/// Multi-head scaled dot-product attention over a batch packed as [batch*seq, hidden]
/// rows (row = b*seq + t). Keys whose mask entry is zero receive exactly zero weight.
/// When `probs_out` is given it receives the weights as [batch*heads*seq, seq].
template <typename T>
Var<T> multi_head_attention(Var<T> q, Var<T> k, Var<T> v, std::span<const std::uint8_t> key_mask, std::size_t batch,
                            std::size_t heads, Tensor<T>* probs_out = nullptr) {
  auto& tape = detail::same_tape("multi_head_attention", {q, k, v});
  const auto& Q = tape.value(q);
  const auto& K = tape.value(k);
  const auto& V = tape.value(v);
  detail::require_rank2("multi_head_attention", Q.shape());
  if (K.shape() != Q.shape()) detail::shape_mismatch("multi_head_attention", Q.shape(), K.shape());
  if (V.shape() != Q.shape()) detail::shape_mismatch("multi_head_attention", Q.shape(), V.shape());
  const std::size_t rows = Q.dim(0), hidden = Q.dim(1);
  if (batch == 0 || rows % batch != 0 || heads == 0 || hidden % heads != 0 || key_mask.size() != rows) {
    throw ShapeError("multi_head_attention: shape " + to_string(Q.shape()) + " incompatible with batch " +
                     std::to_string(batch) + ", heads " + std::to_string(heads) + ", mask length " +
                     std::to_string(key_mask.size()));
  }
  const std::size_t seq = rows / batch, hd = hidden / heads;
  const T sc = T(1) / std::sqrt(static_cast<T>(hd));
  using Map = detail::ConstStridedMap<T>;
  using MutMap = detail::StridedMap<T>;
  const auto S = static_cast<Eigen::Index>(seq), D = static_cast<Eigen::Index>(hd);
  const Eigen::OuterStride<> stride(static_cast<Eigen::Index>(hidden));

  auto probs = std::make_shared<Tensor<T>>(Shape{batch * heads * seq, seq});
  Tensor<T> out({rows, hidden});
  detail::RowMatrix<T> scores(S, S);
  for (std::size_t b = 0; b < batch; ++b) {
    const std::uint8_t* km = key_mask.data() + b * seq;
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t off = b * seq * hidden + h * hd;
      Map qh(Q.data() + off, S, D, stride), kh(K.data() + off, S, D, stride), vh(V.data() + off, S, D, stride);
      scores.noalias() = qh * kh.transpose();
      auto P = detail::mat(*probs, batch * heads * seq, seq).middleRows(static_cast<Eigen::Index>((b * heads + h) * seq), S);
      for (Eigen::Index i = 0; i < S; ++i) {
        T mx = -std::numeric_limits<T>::infinity();
        for (Eigen::Index j = 0; j < S; ++j)
          if (km[j]) mx = std::max(mx, scores(i, j) * sc);
        T z{0};
        for (Eigen::Index j = 0; j < S; ++j) {
          const T e = km[j] ? std::exp(scores(i, j) * sc - mx) : T{0};
          P(i, j) = e;
          z += e;
        }
        if (z > T{0})
          for (Eigen::Index j = 0; j < S; ++j) P(i, j) /= z;
      }
      MutMap oh(out.data() + off, S, D, stride);
      oh.noalias() = P * vh;
    }
  }
  if (probs_out) *probs_out = *probs;
  return tape.record("multi_head_attention", std::move(out), {q, k, v},
                     [probs, batch, heads, seq, hidden, hd, sc](const auto& args) {
                       const auto S = static_cast<Eigen::Index>(seq), D = static_cast<Eigen::Index>(hd);
                       const Eigen::OuterStride<> stride(static_cast<Eigen::Index>(hidden));
                       auto* gq = args.grad_in(0);
                       auto* gk = args.grad_in(1);
                       auto* gv = args.grad_in(2);
                       detail::RowMatrix<T> dP(S, S), dS(S, S);
                       for (std::size_t b = 0; b < batch; ++b) {
                         for (std::size_t h = 0; h < heads; ++h) {
                           const std::size_t off = b * seq * hidden + h * hd;
                           Map qh(args.in(0).data() + off, S, D, stride), kh(args.in(1).data() + off, S, D, stride),
                               vh(args.in(2).data() + off, S, D, stride), go(args.grad.data() + off, S, D, stride);
                           auto P = detail::mat(*probs, batch * heads * seq, seq)
                                        .middleRows(static_cast<Eigen::Index>((b * heads + h) * seq), S);
                           if (gv) MutMap(gv->data() + off, S, D, stride).noalias() += P.transpose() * go;
                           if (!gq && !gk) continue;
                           dP.noalias() = go * vh.transpose();
                           for (Eigen::Index i = 0; i < S; ++i) {
                             T s{0};
                             for (Eigen::Index j = 0; j < S; ++j) s += P(i, j) * dP(i, j);
                             for (Eigen::Index j = 0; j < S; ++j) dS(i, j) = P(i, j) * (dP(i, j) - s) * sc;
                           }
                           if (gq) MutMap(gq->data() + off, S, D, stride).noalias() += dS * kh;
                           if (gk) MutMap(gk->data() + off, S, D, stride).noalias() += dS.transpose() * qh;
                         }
                       }
                     });
}

}  // namespace cdistill
