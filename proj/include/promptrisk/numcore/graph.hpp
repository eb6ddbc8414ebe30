#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <numbers>
#include <span>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include <Eigen/Core>

#include "promptrisk/common.hpp"
#include "promptrisk/numcore/params.hpp"
#include "promptrisk/numcore/tensor.hpp"

namespace promptrisk::nc {

class StaleGraphError : public Error {
 public:
  using Error::Error;
};

class Graph;

// Handle to a node of a Graph. Cheap to copy; valid while the graph lives.
struct Var {
  Graph* graph = nullptr;
  std::uint32_t id = 0;
};

// Define-by-run tape. Each op appends a node holding its forward value and a
// closure that propagates the node's gradient to its inputs. backward() may
// run once per recorded forward pass.
class Graph {
 public:
  using Backward = std::function<void(Var out)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  // With gradients disabled no closures are recorded (inference).
  void set_grad_enabled(bool on) { grad_enabled_ = on; }
  bool grad_enabled() const { return grad_enabled_; }

  Var parameter(Parameter& p) {
    Node n;
    n.param = &p;
    n.external = &p.value;
    n.requires_grad = grad_enabled_ && p.trainable();
    return push(std::move(n));
  }

  // Read-only view of a parameter; never receives gradient.
  Var parameter(const Parameter& p) {
    Node n;
    n.external = &p.value;
    return push(std::move(n));
  }

  Var constant(Tensor t) {
    Node n;
    n.value = std::move(t);
    return push(std::move(n));
  }

  // Leaf with its own gradient slot; used by gradient checks.
  Var leaf(Tensor t) {
    Node n;
    n.value = std::move(t);
    n.requires_grad = grad_enabled_;
    return push(std::move(n));
  }

  const Tensor& value(Var v) const {
    const Node& n = nodes_[v.id];
    return n.external ? *n.external : n.value;
  }

  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }

  // Gradient slot of a node, zero-initialised on first use.
  std::vector<double>& grad(Var v) {
    Node& n = nodes_[v.id];
    if (n.param) return n.param->grad_buffer();
    if (n.grad.size() != n.value.size()) n.grad.assign(n.value.size(), 0.0);
    return n.grad;
  }

  // Appends an op result. The closure runs only if the result requires grad.
  Var record(Tensor value, std::initializer_list<Var> inputs, Backward backward) {
    Node n;
    n.value = std::move(value);
    for (Var in : inputs) n.requires_grad = n.requires_grad || nodes_[in.id].requires_grad;
    if (n.requires_grad) n.backward = std::move(backward);
    return push(std::move(n));
  }
  Var record_many(Tensor value, std::span<const Var> inputs, Backward backward) {
    Node n;
    n.value = std::move(value);
    for (Var in : inputs) n.requires_grad = n.requires_grad || nodes_[in.id].requires_grad;
    if (n.requires_grad) n.backward = std::move(backward);
    return push(std::move(n));
  }

  void backward(Var loss) {
    if (consumed_) throw StaleGraphError("backward: graph already consumed; run a new forward pass");
    if (value(loss).size() != 1) throw DimensionError("backward: loss must be a scalar, got " + shape_str(value(loss).shape));
    consumed_ = true;
    if (!nodes_[loss.id].requires_grad) return;
    grad(loss)[0] += 1.0;
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || !n.backward) continue;
      if (!n.param && n.grad.empty()) continue;  // no gradient reached this node
      n.backward(Var{this, static_cast<std::uint32_t>(i)});
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Parameter* param = nullptr;
    const Tensor* external = nullptr;
    std::vector<double> grad;
    bool requires_grad = false;
    Backward backward;
  };

  Var push(Node n) {
    if (consumed_) throw StaleGraphError("graph already consumed; start a new Graph for the next forward pass");
    nodes_.push_back(std::move(n));
    return Var{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
  }

  std::deque<Node> nodes_;
  bool grad_enabled_ = true;
  bool consumed_ = false;
};

// ---------------------------------------------------------------------------
// Kernels. All row-major; "acc" variants add into the output.

namespace kernel {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapC = Eigen::Map<const RowMat>;
using Map = Eigen::Map<RowMat>;

// C[m,n] += A[m,k] * B[k,n]
inline void gemm_nn_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  const auto M = static_cast<Eigen::Index>(m), K = static_cast<Eigen::Index>(k), N = static_cast<Eigen::Index>(n);
  Map(c, M, N).noalias() += MapC(a, M, K) * MapC(b, K, N);
}

// C[m,n] += A[k,m]^T * B[k,n]
inline void gemm_tn_acc(const double* a, const double* b, double* c, std::size_t k, std::size_t m, std::size_t n) {
  const auto M = static_cast<Eigen::Index>(m), K = static_cast<Eigen::Index>(k), N = static_cast<Eigen::Index>(n);
  Map(c, M, N).noalias() += MapC(a, K, M).transpose() * MapC(b, K, N);
}

// C[m,n] += A[m,k] * B[n,k]^T
inline void gemm_nt_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  const auto M = static_cast<Eigen::Index>(m), K = static_cast<Eigen::Index>(k), N = static_cast<Eigen::Index>(n);
  Map(c, M, N).noalias() += MapC(a, M, K) * MapC(b, N, K).transpose();
}

}  // namespace kernel

namespace detail {

// `what` is a string or a callable producing one; the callable only runs on failure.
template <class What>
inline void require(bool ok, std::string_view op, What&& what) {
  if (ok) return;
  if constexpr (std::is_invocable_v<What>)
    throw DimensionError(std::string(op) + ": " + what());
  else
    throw DimensionError(std::string(op) + ": " + std::string(what));
}

inline void require_matrix(const Tensor& t, std::string_view op) {
  require(t.shape.size() == 2, op, [&] { return "expected a matrix, got " + shape_str(t.shape); });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Ops

}  // namespace promptrisk::nc
