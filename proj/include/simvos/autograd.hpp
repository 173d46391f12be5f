#pragma once

// Reverse-mode differentiation over Tensor values. Ops build a dynamic
// graph of shared nodes; backward() walks it once in reverse topological
// order and accumulates gradients into leaves. A thread-local grad mode
// switch lets inference run without retaining the graph.

#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "simvos/tensor.hpp"

namespace simvos {

template <typename S>
struct Node;

template <typename S>
using Var = std::shared_ptr<Node<S>>;

template <typename S>
struct Node {
  Tensor<S> value;
  Tensor<S> grad;  // allocated on first accumulation
  bool requires_grad = false;
  std::vector<Var<S>> parents;
  std::function<void(Node<S>&)> backward_fn;

  explicit Node(Tensor<S> v) : value(std::move(v)) {}

  void accumulate(const Tensor<S>& g) {
    if (!g.same_dims(value)) throw ShapeError("gradient dims mismatch value dims");
    if (grad.empty()) {
      grad = g;
      return;
    }
    for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += g[i];
  }

  Tensor<S>& grad_or_zeros() {
    if (grad.empty()) grad = Tensor<S>(value.dims());
    return grad;
  }
};

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

inline bool grad_enabled() { return grad_mode_flag(); }

struct NoGradGuard {
  NoGradGuard() : prev_(grad_mode_flag()) { grad_mode_flag() = false; }
  ~NoGradGuard() { grad_mode_flag() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

template <typename S>
Var<S> constant(Tensor<S> v) {
  return std::make_shared<Node<S>>(std::move(v));
}

template <typename S>
Var<S> leaf(Tensor<S> v) {
  auto n = std::make_shared<Node<S>>(std::move(v));
  n->requires_grad = true;
  return n;
}

// Builds an op node. The backward closure reads node.grad and accumulates
// into the parents. When grad mode is off (or no parent needs gradients)
// the node is detached so intermediate values free eagerly.
template <typename S>
Var<S> make_op(Tensor<S> value, std::vector<Var<S>> parents,
               std::function<void(Node<S>&)> backward_fn) {
  auto n = std::make_shared<Node<S>>(std::move(value));
  bool needs = false;
  if (grad_enabled()) {
    for (const auto& p : parents) needs = needs || (p && p->requires_grad);
  }
  if (needs) {
    n->requires_grad = true;
    n->parents = std::move(parents);
    n->backward_fn = std::move(backward_fn);
  }
  return n;
}

template <typename S>
void backward(const Var<S>& root) {
  if (!root) throw OracleError("backward on null node");
  if (root->value.size() != 1) throw ShapeError("backward root must be a scalar");
  if (!root->requires_grad) return;

  // Iterative DFS topological order over the parent DAG.
  std::vector<Node<S>*> order;
  std::unordered_set<Node<S>*> seen;
  std::vector<std::pair<Node<S>*, std::size_t>> stack;
  stack.emplace_back(root.get(), 0);
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      Node<S>* p = node->parents[idx].get();
      ++idx;
      if (p && p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root->accumulate(Tensor<S>::full(root->value.dims(), S(1)));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<S>* n = *it;
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
  }
}

// A named learnable tensor with its gradient and optimizer state.
template <typename S>
struct Param {
  std::string name;
  Var<S> var;
  bool learnable = true;
  Tensor<S> moment1;  // AdamW first moment
  Tensor<S> moment2;  // AdamW second moment
  std::int64_t steps = 0;

  Param() = default;
  Param(std::string n, Tensor<S> v, bool learn = true)
      : name(std::move(n)), var(std::make_shared<Node<S>>(std::move(v))), learnable(learn) {
    var->requires_grad = learn;
  }

  Tensor<S>& value() { return var->value; }
  const Tensor<S>& value() const { return var->value; }
  Tensor<S>& grad() { return var->grad_or_zeros(); }

  void zero_grad() {
    if (!var->grad.empty()) var->grad.set_zero();
  }
};

template <typename S>
using ParamRefs = std::vector<Param<S>*>;

}  // namespace simvos
