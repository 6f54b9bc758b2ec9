#include "afm/autodiff.hpp"

#include <unordered_set>

#include "afm/errors.hpp"

namespace afm {

namespace {
thread_local bool t_grad_enabled = true;
}

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

template <typename T>
void Node<T>::accumulate(const Tensor<T>& g) {
  if (grad.empty()) {
    grad = g;
    return;
  }
  if (g.shape() != value.shape()) {
    throw DimensionError(std::string("gradient shape ") + shape_str(g.shape()) + " does not match value " +
                         shape_str(value.shape()) + " at op " + op);
  }
  T* dst = grad.ptr();
  const T* src = g.ptr();
  for (std::size_t i = 0; i < grad.size(); ++i) dst[i] += src[i];
}

template <typename T>
Tensor<T>& Node<T>::grad_buffer() {
  if (grad.empty()) grad = Tensor<T>(value.shape(), T{0});
  return grad;
}

template <typename T>
Var<T>::Var(Tensor<T> value, bool requires_grad) : node_(std::make_shared<Node<T>>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

template <typename T>
Var<T> make_result(Tensor<T> value, std::vector<Var<T>> parents, BackwardFn<T> backward, const char* op) {
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(value);
  node->op = op;
  bool needs = false;
  if (grad_enabled()) {
    for (const auto& p : parents) needs = needs || p.requires_grad();
  }
  if (needs) {
    node->requires_grad = true;
    node->backward = std::move(backward);
    node->parents.reserve(parents.size());
    for (auto& p : parents) node->parents.push_back(p.node_ptr());
  }
  return Var<T>(std::move(node));
}

namespace {

// Iterative post-order DFS; returns nodes with every node after all its parents.
template <typename T>
std::vector<Node<T>*> topo_order(Node<T>* root) {
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> visited;
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  stack.emplace_back(root, 0);
  visited.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;
}

}  // namespace

template <typename T>
void backward(const Var<T>& loss) {
  if (!loss.defined()) throw ContractError("backward on an undefined variable");
  if (loss.value().size() != 1) {
    throw ContractError("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
  }
  Node<T>& root = loss.node();
  if (root.backward_done) {
    throw ContractError("backward already ran on this loss; call reset_graph_grads first");
  }
  root.backward_done = true;
  if (!root.requires_grad) return;
  auto order = topo_order(&root);
  root.grad = Tensor<T>(root.value.shape(), T{1});
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* node = *it;
    if (node->backward && !node->grad.empty()) node->backward(*node);
  }
}

template <typename T>
void reset_graph_grads(const Var<T>& root) {
  if (!root.defined()) return;
  root.node().backward_done = false;
  for (Node<T>* node : topo_order(&root.node())) node->grad = Tensor<T>();
}

template struct Node<float>;
template struct Node<double>;
template class Var<float>;
template class Var<double>;
template Var<float> make_result(Tensor<float>, std::vector<Var<float>>, BackwardFn<float>, const char*);
template Var<double> make_result(Tensor<double>, std::vector<Var<double>>, BackwardFn<double>, const char*);
template void backward(const Var<float>&);
template void backward(const Var<double>&);
template void reset_graph_grads(const Var<float>&);
template void reset_graph_grads(const Var<double>&);

}  // namespace afm
