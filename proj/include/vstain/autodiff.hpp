// Reverse-mode automatic differentiation over Tensor values.
//
// Every differentiable operation returns a Var whose node records its parents
// and a closure that pushes the node's gradient into them. backward() walks
// the graph once in reverse topological order.
//
// Gradient policy: leaf gradients accumulate additively across backward
// passes, so callers zero them (Var::zero_grad or ParameterStore::zero_grad)
// before each pass. A graph can be back-propagated only once; the second call
// on the same loss throws.
#pragma once

#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "vstain/error.hpp"
#include "vstain/tensor.hpp"

namespace vstain {

namespace detail {
inline thread_local bool grad_mode_enabled = true;
}

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode_enabled) { detail::grad_mode_enabled = false; }
  ~NoGradGuard() { detail::grad_mode_enabled = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

inline bool grad_enabled() noexcept { return detail::grad_mode_enabled; }

template <class T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;
  bool requires_grad = false;
  bool consumed = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  bool is_leaf() const noexcept { return parents.empty(); }

  Tensor<T>& grad_buffer() {
    if (grad.empty() && !value.empty()) grad = Tensor<T>(value.shape());
    if (grad.shape() != value.shape()) grad = Tensor<T>(value.shape());
    return grad;
  }
};

template <class T>
class Var {
 public:
  Var() : node_(std::make_shared<Node<T>>()) {}

  explicit Var(Tensor<T> value, bool requires_grad = false) : node_(std::make_shared<Node<T>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }

  static Var scalar(T v, bool requires_grad = false) { return Var(Tensor<T>({1}, v), requires_grad); }

  const Tensor<T>& value() const noexcept { return node_->value; }
  Tensor<T>& mutable_value() noexcept { return node_->value; }
  const Tensor<T>& grad() const noexcept { return node_->grad; }
  Tensor<T>& mutable_grad() { return node_->grad_buffer(); }
  bool has_grad() const noexcept { return !node_->grad.empty(); }

  const Shape& shape() const noexcept { return node_->value.shape(); }
  std::size_t dim(std::size_t i) const { return node_->value.dim(i); }
  std::size_t size() const noexcept { return node_->value.size(); }
  T item() const {
    if (size() != 1) throw InvalidArgument("item() on non-scalar of shape " + shape_str(shape()));
    return node_->value[0];
  }

  bool requires_grad() const noexcept { return node_->requires_grad; }
  void set_requires_grad(bool on) noexcept { node_->requires_grad = on; }
  void zero_grad() { node_->grad = Tensor<T>(); }
  const char* op() const noexcept { return node_->op; }

  Node<T>& node() noexcept { return *node_; }
  const std::shared_ptr<Node<T>>& node_ptr() const noexcept { return node_; }

  /// A leaf holding the same value, cut from the graph.
  Var detach() const { return Var(node_->value, false); }

 private:
  std::shared_ptr<Node<T>> node_;
};

/// Builds the result node of an operation. The backward closure is attached
/// only if recording is enabled and some parent needs a gradient.
template <class T>
Var<T> make_result(Tensor<T> value, const char* op, std::vector<Var<T>> parents,
                   std::function<void(Node<T>&)> backward) {
  Var<T> out(std::move(value));
  out.node().op = op;
  if (!grad_enabled()) return out;
  bool any = false;
  for (const auto& p : parents) any = any || p.requires_grad();
  if (!any) return out;
  out.set_requires_grad(true);
  for (auto& p : parents) out.node().parents.push_back(p.node_ptr());
  out.node().backward = std::move(backward);
  return out;
}

/// Adds `g` into the gradient of `parent` if it is tracked.
template <class T>
void accumulate_grad(Node<T>& parent, const Tensor<T>& g) {
  if (!parent.requires_grad) return;
  auto& buf = parent.grad_buffer();
  auto dst = buf.data();
  auto src = g.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

/// Back-propagates from a scalar loss into every tracked leaf.
template <class T>
void backward(Var<T>& loss) {
  if (loss.size() != 1) throw InvalidArgument("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
  auto& root = loss.node();
  if (root.consumed) throw InvalidArgument("backward called twice on the same graph");
  if (!root.requires_grad) throw InvalidArgument("loss does not depend on any tracked tensor");

  // Iterative post-order DFS gives a topological order.
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{&root, 0}};
  seen.insert(&root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* parent = node->parents[next++].get();
      if (parent->requires_grad && seen.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root.grad_buffer().fill(T{1});
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* node = *it;
    if (node->backward && !node->grad.empty()) node->backward(*node);
  }
  // Release interior state; leaves keep their accumulated gradients.
  for (Node<T>* node : order) {
    if (node->is_leaf()) continue;
    node->backward = nullptr;
    node->parents.clear();
    node->grad = Tensor<T>();
    node->consumed = true;
  }
  root.consumed = true;
}

}  // namespace vstain
