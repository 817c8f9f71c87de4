#pragma once

// Define-by-run reverse-mode automatic differentiation over dense row-major
// matrices. Every operation in ops.hpp records a node holding its value and a
// closure that pushes the upstream gradient into its parents. The graph lives
// exactly as long as the tensors that reference it, so it is rebuilt on every
// optimisation step.

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "rime/numcore/errors.hpp"

namespace rime {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Index = Eigen::Index;

namespace detail {

struct Node {
  Matrix value;
  Matrix grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  void ensure_grad() {
    if (grad.rows() != value.rows() || grad.cols() != value.cols()) {
      grad = Matrix::Zero(value.rows(), value.cols());
    }
  }

  template <typename Expr>
  void accumulate(const Expr& g) {
    if (!requires_grad) return;
    ensure_grad();
    grad += g;
  }
};

inline int& no_grad_depth() {
  thread_local int depth = 0;
  return depth;
}

}  // namespace detail

/// Suspends graph recording on this thread while alive.
class NoGradGuard {
 public:
  NoGradGuard() { ++detail::no_grad_depth(); }
  ~NoGradGuard() { --detail::no_grad_depth(); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

inline bool grad_enabled() { return detail::no_grad_depth() == 0; }

/// Shared handle to a node of the computation graph. Copies alias the same node.
class Tensor {
 public:
  Tensor() = default;

  static Tensor constant(Matrix value) {
    auto node = std::make_shared<detail::Node>();
    node->value = std::move(value);
    return Tensor(std::move(node));
  }

  static Tensor constant(double scalar) { return constant(Matrix::Constant(1, 1, scalar)); }

  /// Leaf that accumulates gradients; used for every learnable quantity.
  static Tensor parameter(Matrix value) {
    auto node = std::make_shared<detail::Node>();
    node->value = std::move(value);
    node->requires_grad = true;
    node->ensure_grad();
    return Tensor(std::move(node));
  }

  bool defined() const { return node_ != nullptr; }
  const Matrix& value() const { return node_->value; }
  Matrix& mutable_value() { return node_->value; }
  bool requires_grad() const { return node_->requires_grad; }

  /// Gradient from the last backward pass; zeros when the node was not reached.
  const Matrix& grad() const {
    node_->ensure_grad();
    return node_->grad;
  }
  void zero_grad() { node_->grad = Matrix::Zero(rows(), cols()); }

  Index rows() const { return node_->value.rows(); }
  Index cols() const { return node_->value.cols(); }
  Index size() const { return node_->value.size(); }
  std::vector<std::size_t> shape() const {
    return {static_cast<std::size_t>(rows()), static_cast<std::size_t>(cols())};
  }
  double item() const {
    if (size() != 1) throw UsageError("item() on a tensor with " + std::to_string(size()) + " entries");
    return node_->value(0, 0);
  }

  /// Same values, cut from the graph.
  Tensor detach() const { return constant(node_->value); }

  detail::Node* node() const { return node_.get(); }
  const std::shared_ptr<detail::Node>& shared_node() const { return node_; }

  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

/// Builds an op result. Parents that do not require grad are dropped; when
/// none remain, or recording is suspended, the result is a constant.
inline Tensor make_op(Matrix value, std::initializer_list<Tensor> parents,
                      std::function<void(detail::Node&)> backward) {
  auto node = std::make_shared<detail::Node>();
  node->value = std::move(value);
  if (grad_enabled()) {
    for (const auto& p : parents) {
      if (p.requires_grad()) {
        node->parents.push_back(p.shared_node());
      }
    }
    if (!node->parents.empty()) {
      node->requires_grad = true;
      node->backward = std::move(backward);
    }
  }
  return Tensor(std::move(node));
}

inline Tensor make_op(Matrix value, const std::vector<Tensor>& parents,
                      std::function<void(detail::Node&)> backward) {
  auto node = std::make_shared<detail::Node>();
  node->value = std::move(value);
  if (grad_enabled()) {
    for (const auto& p : parents) {
      if (p.requires_grad()) node->parents.push_back(p.shared_node());
    }
    if (!node->parents.empty()) {
      node->requires_grad = true;
      node->backward = std::move(backward);
    }
  }
  return Tensor(std::move(node));
}

/// Reverse sweep from a scalar loss. Leaves reachable from the loss end up
/// holding d(loss)/d(leaf); their previous gradients are overwritten.
inline void backward(const Tensor& loss) {
  if (!loss.defined() || loss.size() != 1) {
    throw UsageError("backward() needs a scalar loss, got " +
                     (loss.defined() ? std::to_string(loss.rows()) + "x" + std::to_string(loss.cols())
                                     : std::string("an undefined tensor")));
  }
  if (!std::isfinite(loss.value()(0, 0))) {
    throw NumericalError("backward() on a non-finite loss");
  }
  if (!loss.requires_grad()) return;

  // Iterative post-order DFS; reversed order is a valid topological order.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  stack.emplace_back(loss.node(), 0);
  seen.insert(loss.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::Node* parent = node->parents[next++].get();
      if (parent->requires_grad && seen.insert(parent).second) {
        stack.emplace_back(parent, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (auto* node : order) {
    node->grad = Matrix::Zero(node->value.rows(), node->value.cols());
  }
  loss.node()->grad(0, 0) = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* node = *it;
    if (node->backward) node->backward(*node);
  }
  // Interior gradients are not needed after the sweep.
  for (auto* node : order) {
    if (node->backward) node->grad.resize(0, 0);
  }
}

/// As above, but every listed parameter is zeroed first so that parameters
/// the loss does not depend on report a zero gradient.
inline void backward(const Tensor& loss, std::span<Tensor> params) {
  for (auto& p : params) p.zero_grad();
  backward(loss);
}

}  // namespace rime
