#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "afm/tensor.hpp"

namespace afm {

template <typename T>
struct Node;

// Backward closure: reads the node's accumulated gradient and pushes
// contributions into its parents through Node::accumulate.
template <typename T>
using BackwardFn = std::function<void(Node<T>& self)>;

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // absent until something flows into it
  bool requires_grad = false;
  bool backward_done = false;
  std::vector<std::shared_ptr<Node>> parents;
  BackwardFn<T> backward;
  const char* op = "leaf";

  // Adds g into this node's gradient, allocating zeros on first use.
  void accumulate(const Tensor<T>& g);
  // Returns the gradient buffer, allocating zeros on first use.
  Tensor<T>& grad_buffer();
};

/// Handle to a graph node. Copies share the node.
template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(Tensor<T> value, bool requires_grad = false);
  explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  bool defined() const { return static_cast<bool>(node_); }
  const Tensor<T>& value() const { return node_->value; }
  const Tensor<T>& grad() const { return node_->grad; }
  bool has_grad() const { return !node_->grad.empty(); }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t dim(std::size_t axis) const { return node_->value.dim(axis); }
  std::size_t rank() const { return node_->value.rank(); }
  bool requires_grad() const { return node_->requires_grad; }
  T item() const { return node_->value.item(); }

  Node<T>& node() const { return *node_; }
  const std::shared_ptr<Node<T>>& node_ptr() const { return node_; }

  // In-place parameter update (optimizer and checkpoint loading only).
  Tensor<T>& mutable_value() { return node_->value; }
  void zero_grad() { node_->grad = Tensor<T>(); }

 private:
  std::shared_ptr<Node<T>> node_;
};

/// Whether new operations record graph edges on this thread.
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

/// Builds an op result. The backward closure is dropped (and the result is a
/// constant) when no parent requires a gradient or recording is disabled.
template <typename T>
Var<T> make_result(Tensor<T> value, std::vector<Var<T>> parents, BackwardFn<T> backward, const char* op);

/// Reverse-mode sweep from a single-element loss. Populates grads on every
/// node on a path from the loss to a leaf that requires grad. Throws
/// ContractError for non-scalar losses or a second call on the same loss
/// without reset_graph_grads().
template <typename T>
void backward(const Var<T>& loss);

/// Clears gradients of every node reachable from `root` and re-arms backward.
template <typename T>
void reset_graph_grads(const Var<T>& root);

extern template struct Node<float>;
extern template struct Node<double>;
extern template class Var<float>;
extern template class Var<double>;

}  // namespace afm
