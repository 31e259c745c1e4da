// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "warpgrad/tensor.hpp"

namespace warpgrad {

// Reverse-mode tape over dense tensors. The backward pass emits ordinary graph
// nodes for every adjoint it computes, so gradients are themselves
// differentiable: a second backward over an expression containing gradients
// yields exact second-order derivatives (double backprop). That is the whole
// trick this library rests on — meta-gradients of the form
// d/dphi L_meta(theta - alpha * dL_task/dtheta(theta; phi); phi) come out of
// two plain backward calls on one graph.

enum class Op : std::uint8_t {
  kLeaf,
  kAdd,
  kSub,
  kMul,
  kMatMul,
  kTranspose,
  kTanh,
  kRelu,
  kStep,  // 1 where input > 0; derivative treated as zero everywhere
  kSigmoid,
  kSin,
  kCos,
  kExp,
  kSquare,
  kSum,
  kMean,
  kScale,       // multiply by a compile-time double attribute
  kSumRows,     // [m,n] -> [1,n]
  kRepeatRows,  // [1,n] -> [m,n]
  kStopGrad,
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::kLeaf: return "leaf";
    case Op::kAdd: return "add";
    case Op::kSub: return "sub";
    case Op::kMul: return "mul";
    case Op::kMatMul: return "matmul";
    case Op::kTranspose: return "transpose";
    case Op::kTanh: return "tanh";
    case Op::kRelu: return "relu";
    case Op::kStep: return "step";
    case Op::kSigmoid: return "sigmoid";
    case Op::kSin: return "sin";
    case Op::kCos: return "cos";
    case Op::kExp: return "exp";
    case Op::kSquare: return "square";
    case Op::kSum: return "sum";
    case Op::kMean: return "mean";
    case Op::kScale: return "scale";
    case Op::kSumRows: return "sum_rows";
    case Op::kRepeatRows: return "repeat_rows";
    case Op::kStopGrad: return "stop_gradient";
  }
  return "?";
}

class Graph;

/// Handle to a tensor recorded on a graph.
class Var {
 public:
  Var() = default;
  Var(Graph* g, std::int32_t id) : g_(g), id_(id) {}

  Graph* graph() const { return g_; }
  std::int32_t id() const { return id_; }
  bool valid() const { return g_ != nullptr; }

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }

 private:
  Graph* g_ = nullptr;
  std::int32_t id_ = -1;
};

class Graph {
 public:
  Graph() { nodes_.reserve(256); }
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  std::size_t size() const { return nodes_.size(); }
  const Tensor& value(std::int32_t id) const { return nodes_[static_cast<std::size_t>(id)].val; }

  /// Record an input tensor. Whether it is treated as a constant or a
  /// differentiable parameter is decided by the `wrt` selection at backward
  /// time; storage is shared with the caller's tensor (copy-on-write).
  Var leaf(Tensor v) { return record(Op::kLeaf, -1, -1, std::move(v)); }
  Var constant(Tensor v) { return leaf(std::move(v)); }
  Var scalar(double v) { return leaf(Tensor::scalar(v)); }

  Var add(Var a, Var b) { return binary(Op::kAdd, a, b); }
  Var sub(Var a, Var b) { return binary(Op::kSub, a, b); }
  Var mul(Var a, Var b) { return binary(Op::kMul, a, b); }

  Var matmul(Var a, Var b) {
    const Tensor& A = value(a.id());
    const Tensor& B = value(b.id());
    if (A.shape().rank() != 2 || B.shape().rank() != 2 ||
        A.cols() != B.rows()) {
      throw TensorError(std::string("matmul shape mismatch: ") +
                        A.shape().str() + " x " + B.shape().str());
    }
    Tensor out(Shape::matrix(A.rows(), B.cols()));
    eigen_map(out).noalias() = eigen_map(A) * eigen_map(B);
    return record(Op::kMatMul, a.id(), b.id(), std::move(out));
  }

  Var transpose(Var a) {
    const Tensor& A = value(a.id());
    if (A.shape().rank() != 2) {
      throw TensorError("transpose expects a matrix, got " + A.shape().str());
    }
    Tensor out(Shape::matrix(A.cols(), A.rows()));
    eigen_map(out) = eigen_map(A).transpose();
    return record(Op::kTranspose, a.id(), -1, std::move(out));
  }

  Var tanh(Var a) { return unary(Op::kTanh, a, [](double x) { return std::tanh(x); }); }
  Var relu(Var a) { return unary(Op::kRelu, a, [](double x) { return x > 0.0 ? x : 0.0; }); }
  Var step(Var a) { return unary(Op::kStep, a, [](double x) { return x > 0.0 ? 1.0 : 0.0; }); }
  Var sigmoid(Var a) {
    return unary(Op::kSigmoid, a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); });
  }
  Var sin(Var a) { return unary(Op::kSin, a, [](double x) { return std::sin(x); }); }
  Var cos(Var a) { return unary(Op::kCos, a, [](double x) { return std::cos(x); }); }
  Var exp(Var a) { return unary(Op::kExp, a, [](double x) { return std::exp(x); }); }
  Var square(Var a) { return unary(Op::kSquare, a, [](double x) { return x * x; }); }

  Var sum(Var a) {
    const Tensor& A = value(a.id());
    double s = 0.0;
    for (double v : A.values()) s += v;
    return record(Op::kSum, a.id(), -1, Tensor::scalar(s));
  }

  Var mean(Var a) {
    const Tensor& A = value(a.id());
    if (A.numel() == 0) throw TensorError("mean of empty tensor");
    double s = 0.0;
    for (double v : A.values()) s += v;
    return record(Op::kMean, a.id(), -1,
                  Tensor::scalar(s / static_cast<double>(A.numel())));
  }

  Var scale(Var a, double c) {
    const Tensor& A = value(a.id());
    Tensor out(A.shape());
    double* o = out.mutable_data();
    const double* x = A.data();
    for (std::size_t i = 0; i < A.numel(); ++i) o[i] = c * x[i];
    Var v = record(Op::kScale, a.id(), -1, std::move(out));
    nodes_.back().attr_f = c;
    return v;
  }

  Var neg(Var a) { return scale(a, -1.0); }

  Var sum_rows(Var a) {
    const Tensor& A = value(a.id());
    if (A.shape().rank() != 2) {
      throw TensorError("sum_rows expects a matrix, got " + A.shape().str());
    }
    Tensor out(Shape::matrix(1, A.cols()));
    double* o = out.mutable_data();
    const double* x = A.data();
    for (int r = 0; r < A.rows(); ++r) {
      for (int c = 0; c < A.cols(); ++c) o[c] += x[r * A.cols() + c];
    }
    return record(Op::kSumRows, a.id(), -1, std::move(out));
  }

  Var repeat_rows(Var a, int rows) {
    const Tensor& A = value(a.id());
    if (A.shape().rank() != 2 || A.rows() != 1) {
      throw TensorError("repeat_rows expects a [1,n] matrix, got " +
                        A.shape().str());
    }
    Tensor out(Shape::matrix(rows, A.cols()));
    double* o = out.mutable_data();
    const double* x = A.data();
    for (int r = 0; r < rows; ++r) {
      for (int c = 0; c < A.cols(); ++c) o[r * A.cols() + c] = x[c];
    }
    Var v = record(Op::kRepeatRows, a.id(), -1, std::move(out));
    nodes_.back().attr_i = rows;
    return v;
  }

  /// Forward identity; backward treats the node as a constant.
  Var stop_gradient(Var a) {
    return record(Op::kStopGrad, a.id(), -1, value(a.id()));
  }

  /// Reverse pass from a scalar output to the selected nodes. Gradients are
  /// returned as graph variables; with `create_graph` they can be fed into
  /// further ops and differentiated again. Without it the graph is marked
  /// consumed and any later backward on it is an error.
  std::vector<Var> backward(Var out, const std::vector<Var>& wrt,
                            bool create_graph = false) {
    if (consumed_) {
      throw TensorError(
          "backward on a consumed graph (previous backward ran without "
          "create_graph)");
    }
    const Tensor& out_val = value(out.id());
    if (out_val.numel() != 1) {
      throw TensorError("backward expects a scalar output, got shape " +
                        out_val.shape().str());
    }

    const std::int32_t top = out.id();
    // Which nodes can influence a wrt entry: adjoints are only propagated into
    // that subgraph. (Saves the dead paths into data constants.)
    std::vector<std::uint8_t> needed(static_cast<std::size_t>(top) + 1, 0);
    for (const Var& w : wrt) {
      if (w.graph() != this) {
        throw TensorError("backward: wrt variable from a different graph");
      }
      if (w.id() <= top) needed[static_cast<std::size_t>(w.id())] = 1;
    }
    for (std::int32_t i = 0; i <= top; ++i) {
      const Node& n = nodes_[static_cast<std::size_t>(i)];
      if (n.a >= 0 && needed[static_cast<std::size_t>(n.a)]) needed[i] = 1;
      if (n.b >= 0 && needed[static_cast<std::size_t>(n.b)]) needed[i] = 1;
    }

    std::vector<std::int32_t> adj(static_cast<std::size_t>(top) + 1, -1);
    adj[static_cast<std::size_t>(top)] =
        constant(Tensor::full(out_val.shape(), 1.0)).id();

    for (std::int32_t i = top; i >= 0; --i) {
      if (adj[static_cast<std::size_t>(i)] < 0) continue;
      // Copy fields: emitting VJP nodes may reallocate the node vector.
      const Node n = nodes_[static_cast<std::size_t>(i)];
      const Var u(this, adj[static_cast<std::size_t>(i)]);
      propagate(n, Var(this, i), u, needed, adj);
    }

    std::vector<Var> grads;
    grads.reserve(wrt.size());
    for (const Var& w : wrt) {
      const std::int32_t a =
          w.id() <= top ? adj[static_cast<std::size_t>(w.id())] : -1;
      if (a >= 0) {
        grads.emplace_back(this, a);
      } else {
        grads.push_back(constant(Tensor::zeros(value(w.id()).shape())));
      }
    }
    if (!create_graph) consumed_ = true;
    return grads;
  }

 private:
  struct Node {
    Op op;
    std::int32_t a = -1, b = -1;
    double attr_f = 0.0;
    std::int32_t attr_i = 0;
    Tensor val;
  };

  using EMat =
      Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

  static Eigen::Map<const EMat> eigen_map(const Tensor& t) {
    return {t.data(), t.rows(), t.cols()};
  }
  static Eigen::Map<EMat> eigen_map(Tensor& t) {
    return {t.mutable_data(), t.rows(), t.cols()};
  }

  Var record(Op op, std::int32_t a, std::int32_t b, Tensor val) {
    if (!val.all_finite()) {
      throw TensorError(std::string("non-finite value produced by op '") +
                        op_name(op) + "' at node " +
                        std::to_string(nodes_.size()));
    }
    nodes_.push_back(Node{op, a, b, 0.0, 0, std::move(val)});
    return Var(this, static_cast<std::int32_t>(nodes_.size()) - 1);
  }

  template <typename F>
  Var unary(Op op, Var a, F f) {
    const Tensor& A = value(a.id());
    Tensor out(A.shape());
    double* o = out.mutable_data();
    const double* x = A.data();
    for (std::size_t i = 0; i < A.numel(); ++i) o[i] = f(x[i]);
    return record(op, a.id(), -1, std::move(out));
  }

  // Elementwise binary with scalar-with-tensor broadcast only: shapes must
  // match exactly, or one operand must have a single element.
  Var binary(Op op, Var a, Var b) {
    const Tensor& A = value(a.id());
    const Tensor& B = value(b.id());
    const bool a_scalar = A.numel() == 1;
    const bool b_scalar = B.numel() == 1;
    if (A.shape() != B.shape() && !a_scalar && !b_scalar) {
      throw TensorError(std::string("op '") + op_name(op) +
                        "' shape mismatch: " + A.shape().str() + " vs " +
                        B.shape().str());
    }
    const Tensor& big = (a_scalar && !b_scalar) ? B : A;
    Tensor out(big.shape());
    double* o = out.mutable_data();
    const double* x = A.data();
    const double* y = B.data();
    const std::size_t n = big.numel();
    auto apply = [op](double u, double v) {
      switch (op) {
        case Op::kAdd: return u + v;
        case Op::kSub: return u - v;
        default: return u * v;
      }
    };
    if (A.shape() == B.shape()) {
      for (std::size_t i = 0; i < n; ++i) o[i] = apply(x[i], y[i]);
    } else if (a_scalar) {
      for (std::size_t i = 0; i < n; ++i) o[i] = apply(x[0], y[i]);
    } else {
      for (std::size_t i = 0; i < n; ++i) o[i] = apply(x[i], y[0]);
    }
    return record(op, a.id(), b.id(), std::move(out));
  }

  // Adjoint for operand `in` of a binary op whose upstream is `u`; reduces to
  // a scalar when the operand was broadcast.
  Var reduce_if_scalar(Var contribution, std::int32_t in_id) {
    if (value(in_id).numel() == 1 &&
        value(contribution.id()).numel() != 1) {
      Var s = sum(contribution);
      // keep the operand's own scalar shape (rank 0 vs [1] vs [1,1] may differ)
      return reshape_scalar_like(s, in_id);
    }
    return contribution;
  }

  // Adjoint shapes must match the operand exactly. Multiplying by a constant
  // one of the wanted single-element shape reshapes without changing the value
  // or the derivative.
  Var reshape_scalar_like(Var scalar_var, std::int32_t like_id) {
    const Shape& want = value(like_id).shape();
    if (value(scalar_var.id()).shape() == want) return scalar_var;
    Tensor out(want);
    out.mutable_data()[0] = 1.0;
    return mul(constant(std::move(out)), scalar_var);
  }

  void add_adjoint(std::int32_t id, Var contribution,
                   std::vector<std::int32_t>& adj) {
    std::int32_t& slot = adj[static_cast<std::size_t>(id)];
    if (slot < 0) {
      slot = contribution.id();
    } else {
      slot = add(Var(this, slot), contribution).id();
    }
  }

  void propagate(const Node& n, Var self, Var u,
                 const std::vector<std::uint8_t>& needed,
                 std::vector<std::int32_t>& adj) {
    auto want = [&](std::int32_t id) {
      return id >= 0 && needed[static_cast<std::size_t>(id)];
    };
    switch (n.op) {
      case Op::kLeaf:
      case Op::kStep:
      case Op::kStopGrad:
        // step is piecewise constant; stop_gradient blocks flow by contract.
        break;
      case Op::kAdd:
        if (want(n.a)) add_adjoint(n.a, reduce_if_scalar(u, n.a), adj);
        if (want(n.b)) add_adjoint(n.b, reduce_if_scalar(u, n.b), adj);
        break;
      case Op::kSub:
        if (want(n.a)) add_adjoint(n.a, reduce_if_scalar(u, n.a), adj);
        if (want(n.b)) add_adjoint(n.b, reduce_if_scalar(neg(u), n.b), adj);
        break;
      case Op::kMul:
        if (want(n.a)) {
          add_adjoint(n.a, reduce_if_scalar(mul(u, Var(this, n.b)), n.a), adj);
        }
        if (want(n.b)) {
          add_adjoint(n.b, reduce_if_scalar(mul(u, Var(this, n.a)), n.b), adj);
        }
        break;
      case Op::kMatMul:
        if (want(n.a)) add_adjoint(n.a, matmul(u, transpose(Var(this, n.b))), adj);
        if (want(n.b)) add_adjoint(n.b, matmul(transpose(Var(this, n.a)), u), adj);
        break;
      case Op::kTranspose:
        if (want(n.a)) add_adjoint(n.a, transpose(u), adj);
        break;
      case Op::kTanh:
        if (want(n.a)) {
          Var one = constant(Tensor::full(self.shape(), 1.0));
          add_adjoint(n.a, mul(u, sub(one, square(self))), adj);
        }
        break;
      case Op::kRelu:
        if (want(n.a)) add_adjoint(n.a, mul(u, step(Var(this, n.a))), adj);
        break;
      case Op::kSigmoid:
        if (want(n.a)) {
          Var one = constant(Tensor::full(self.shape(), 1.0));
          add_adjoint(n.a, mul(u, mul(self, sub(one, self))), adj);
        }
        break;
      case Op::kSin:
        if (want(n.a)) add_adjoint(n.a, mul(u, cos(Var(this, n.a))), adj);
        break;
      case Op::kCos:
        if (want(n.a)) add_adjoint(n.a, mul(u, neg(sin(Var(this, n.a)))), adj);
        break;
      case Op::kExp:
        if (want(n.a)) add_adjoint(n.a, mul(u, self), adj);
        break;
      case Op::kSquare:
        if (want(n.a)) add_adjoint(n.a, mul(u, scale(Var(this, n.a), 2.0)), adj);
        break;
      case Op::kSum:
        if (want(n.a)) {
          Var ones = constant(Tensor::full(value(n.a).shape(), 1.0));
          add_adjoint(n.a, mul(ones, u), adj);
        }
        break;
      case Op::kMean:
        if (want(n.a)) {
          const double inv = 1.0 / static_cast<double>(value(n.a).numel());
          Var ones = constant(Tensor::full(value(n.a).shape(), 1.0));
          add_adjoint(n.a, mul(ones, scale(u, inv)), adj);
        }
        break;
      case Op::kScale:
        if (want(n.a)) add_adjoint(n.a, scale(u, n.attr_f), adj);
        break;
      case Op::kSumRows:
        if (want(n.a)) add_adjoint(n.a, repeat_rows(u, value(n.a).rows()), adj);
        break;
      case Op::kRepeatRows:
        if (want(n.a)) add_adjoint(n.a, sum_rows(u), adj);
        break;
    }
  }

  std::vector<Node> nodes_;
  bool consumed_ = false;
};

inline const Tensor& Var::value() const { return g_->value(id_); }

}  // namespace warpgrad
