#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "mambastyle/errors.hpp"
#include "mambastyle/tensor.hpp"

namespace mambastyle {

// ---------------------------------------------------------------------------
// Thread-local switches: gradient recording and MAC accounting.

namespace detail {
inline thread_local bool grad_enabled = true;
inline thread_local std::uint64_t* mac_sink = nullptr;
}  // namespace detail

class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_enabled) { detail::grad_enabled = false; }
  ~NoGradGuard() { detail::grad_enabled = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Counts multiply-accumulates issued by matmul/conv/scan kernels while alive.
class MacCounter {
 public:
  MacCounter() : previous_(detail::mac_sink) { detail::mac_sink = &count_; }
  ~MacCounter() { detail::mac_sink = previous_; }
  MacCounter(const MacCounter&) = delete;
  MacCounter& operator=(const MacCounter&) = delete;

  [[nodiscard]] std::uint64_t count() const { return count_; }

 private:
  std::uint64_t count_ = 0;
  std::uint64_t* previous_;
};

inline void count_macs(std::uint64_t n) {
  if (detail::mac_sink != nullptr) {
    *detail::mac_sink += n;
  }
}

// ---------------------------------------------------------------------------

template <typename T>
struct Node {
  using Backward = std::function<void(const BasicTensor<T>& grad_out)>;

  BasicTensor<T> value;
  BasicTensor<T> grad;  // allocated on first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  Backward backward;
  const char* op = "leaf";

  [[nodiscard]] bool is_leaf() const { return parents.empty(); }

  /// Gradient buffer, zero-initialised on first use.
  BasicTensor<T>& grad_buffer() {
    if (!grad.defined()) {
      grad = BasicTensor<T>(value.shape());
    }
    return grad;
  }

  void accumulate(const BasicTensor<T>& g) {
    if (!grad.defined() && g.shape() == value.shape()) {
      grad = g;
      return;
    }
    add_into(g);
  }

  void accumulate(BasicTensor<T>&& g) {
    if (!grad.defined() && g.shape() == value.shape()) {
      grad = std::move(g);
      return;
    }
    add_into(g);
  }

 private:
  void add_into(const BasicTensor<T>& g) {
    auto& dst = grad_buffer();
    if (g.size() != dst.size()) {
      throw ShapeError(std::string("accumulate: gradient shape mismatch at ") + op);
    }
    T* d = dst.data().data();
    const T* s = g.data().data();
    for (std::size_t i = 0; i < dst.size(); ++i) {
      d[i] += s[i];
    }
  }
};

/// Handle to a node in the differentiation graph. Cheap to copy.
template <typename T>
class BasicVar {
 public:
  BasicVar() = default;

  explicit BasicVar(BasicTensor<T> value, bool requires_grad = false) : node_(std::make_shared<Node<T>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }

  explicit BasicVar(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  [[nodiscard]] bool defined() const { return node_ != nullptr; }
  [[nodiscard]] const BasicTensor<T>& value() const { return node_->value; }
  /// Mutable access for optimizers and initialisers; never used inside ops.
  [[nodiscard]] BasicTensor<T>& mutable_value() { return node_->value; }
  [[nodiscard]] const Shape& shape() const { return node_->value.shape(); }
  [[nodiscard]] std::size_t dim(std::size_t i) const { return node_->value.dim(i); }
  [[nodiscard]] std::size_t size() const { return node_->value.size(); }
  [[nodiscard]] bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool v) { node_->requires_grad = v; }

  /// Gradient; zeros if nothing has been accumulated yet.
  [[nodiscard]] BasicTensor<T> grad() const {
    return node_->grad.defined() ? node_->grad : BasicTensor<T>(node_->value.shape());
  }
  [[nodiscard]] bool has_grad() const { return node_->grad.defined(); }
  void zero_grad() { node_->grad = BasicTensor<T>(); }

  [[nodiscard]] const std::shared_ptr<Node<T>>& node() const { return node_; }
  [[nodiscard]] const char* op() const { return node_->op; }

 private:
  std::shared_ptr<Node<T>> node_;
};

using Var = BasicVar<float>;

template <typename T>
BasicVar<T> constant(BasicTensor<T> value) {
  return BasicVar<T>(std::move(value), false);
}

template <typename T>
BasicVar<T> parameter(BasicTensor<T> value) {
  return BasicVar<T>(std::move(value), true);
}

/// Wraps a freshly computed value as the output of `op`. The backward closure
/// is recorded only when gradients are enabled and some input needs one.
template <typename T>
BasicVar<T> make_result(const char* op, BasicTensor<T> value, std::vector<BasicVar<T>> inputs,
                        typename Node<T>::Backward backward) {
  if (!value.all_finite()) {
    throw NumericalError(std::string(op) + ": non-finite output");
  }
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(value);
  node->op = op;
  bool needs = false;
  if (detail::grad_enabled) {
    for (const auto& in : inputs) {
      needs = needs || in.requires_grad();
    }
  }
  if (needs) {
    node->requires_grad = true;
    node->parents.reserve(inputs.size());
    for (auto& in : inputs) {
      node->parents.push_back(in.node());
    }
    node->backward = std::move(backward);
  }
  return BasicVar<T>(std::move(node));
}

/// Reverse-mode sweep from a scalar root. Leaf gradients accumulate across
/// calls; interior gradients are rebuilt from scratch each call.
template <typename T>
void backward(const BasicVar<T>& root) {
  if (!root.defined() || root.size() != 1) {
    throw ContractError("backward: root must be a scalar, got " +
                        (root.defined() ? shape_str(root.shape()) : std::string("undefined")));
  }
  if (!root.requires_grad()) {
    return;
  }

  // Iterative post-order DFS gives a topological order without recursion.
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) {
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (Node<T>* n : order) {
    if (!n->is_leaf()) {
      n->grad = BasicTensor<T>();
    }
  }
  root.node()->accumulate(BasicTensor<T>::scalar(T{1}));

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward && n->grad.defined()) {
      n->backward(n->grad);
    }
  }
}

}  // namespace mambastyle
