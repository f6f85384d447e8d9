#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace texrect {

using Index = std::int64_t;
using Shape = std::vector<Index>;

/// Raised when tensor extents are incompatible with an operation.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised for invalid run configuration (bad ranges, empty splits, unknown keys).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised when an input violates an operation's contract (e.g. a non-binary mask).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

inline Index numel_of(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

namespace detail {

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

struct BackwardStats {
  std::size_t nodes_visited = 0;
};

inline BackwardStats& backward_stats() {
  thread_local BackwardStats stats;
  return stats;
}

}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

/// Disables graph recording for its lifetime (inference, metrics, data generation).
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // allocated lazily, only when requires_grad
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;
  const char* op = "leaf";

  bool is_leaf() const { return !backward; }

  std::vector<T>& grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), T(0));
    return grad;
  }
};

/// Shared handle to a node of the reverse-mode graph.
///
/// Copies alias the same storage. Values are treated as immutable once an op
/// has consumed them; only parameters (leaves) are updated in place, by the
/// optimizer or by checkpoint loading.
template <typename T>
class Tensor {
 public:
  using value_type = T;
  using NodePtr = std::shared_ptr<Node<T>>;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0), bool requires_grad = false)
      : node_(std::make_shared<Node<T>>()) {
    node_->value.assign(static_cast<std::size_t>(numel_of(shape)), fill);
    node_->shape = std::move(shape);
    node_->requires_grad = requires_grad;
  }

  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false)
      : node_(std::make_shared<Node<T>>()) {
    if (static_cast<Index>(values.size()) != numel_of(shape)) {
      throw DimensionError("tensor data length " + std::to_string(values.size()) +
                           " does not match shape " + shape_str(shape));
    }
    node_->shape = std::move(shape);
    node_->value = std::move(values);
    node_->requires_grad = requires_grad;
  }

  explicit Tensor(NodePtr node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), T(0)); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), T(1)); }
  static Tensor scalar(T v, bool requires_grad = false) { return Tensor(Shape{1}, v, requires_grad); }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  Index dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t rank() const { return node_->shape.size(); }
  Index numel() const { return static_cast<Index>(node_->value.size()); }

  std::span<const T> data() const { return node_->value; }
  /// Mutable view; reserved for parameters, buffers and freshly built inputs.
  std::span<T> mutable_data() { return node_->value; }
  const std::vector<T>& values() const { return node_->value; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return node_->grad_buffer(); }
  void zero_grad() { node_->grad.clear(); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) {
    node_->requires_grad = on;
    if (!on) node_->grad.clear();
  }

  T item() const {
    if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
    return node_->value[0];
  }

  T operator[](Index i) const { return node_->value[static_cast<std::size_t>(i)]; }

  /// New leaf holding a copy of the values, cut from the graph.
  Tensor detach() const { return Tensor(node_->shape, node_->value, false); }

  Node<T>* node() const { return node_.get(); }
  const NodePtr& node_ptr() const { return node_; }

  /// Reverse sweep from this scalar. Visits every reachable node exactly once
  /// in reverse topological order, then releases the intermediate graph.
  void backward() const {
    if (numel() != 1) throw DimensionError("backward() requires a scalar, got " + shape_str(shape()));
    backward_with(std::vector<T>{T(1)});
  }

  void backward_with(const std::vector<T>& seed) const {
    if (!node_->requires_grad) return;
    if (static_cast<Index>(seed.size()) != numel()) throw DimensionError("backward seed size mismatch");
    std::vector<Node<T>*> order = topological_order();
    auto& root_grad = node_->grad_buffer();
    for (std::size_t i = 0; i < seed.size(); ++i) root_grad[i] += seed[i];
    auto& stats = detail::backward_stats();
    stats.nodes_visited = 0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node<T>* n = *it;
      ++stats.nodes_visited;
      if (n->backward && !n->grad.empty()) n->backward(*n);
    }
    for (Node<T>* n : order) {
      if (!n->is_leaf()) {
        n->inputs.clear();
        n->backward = nullptr;
        if (n != node_.get()) n->grad.clear();
      }
    }
  }

 private:
  std::vector<Node<T>*> topological_order() const {
    std::vector<Node<T>*> order;
    std::vector<std::pair<Node<T>*, std::size_t>> stack;
    std::unordered_set<Node<T>*> seen;
    stack.emplace_back(node_.get(), 0);
    seen.insert(node_.get());
    while (!stack.empty()) {
      auto& [n, next] = stack.back();
      if (next < n->inputs.size()) {
        Node<T>* child = n->inputs[next++].get();
        if (child->requires_grad && seen.insert(child).second) {
          stack.emplace_back(child, 0);
        }
      } else {
        order.push_back(n);
        stack.pop_back();
      }
    }
    return order;
  }

  NodePtr node_;
};

namespace detail {

/// Builds an op result. Records inputs and the backward rule only when grad
/// mode is on and at least one input requires a gradient.
template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> value, std::initializer_list<const Tensor<T>*> inputs,
                      const char* op, std::function<void(Node<T>&)> backward) {
  Tensor<T> out(std::move(shape), std::move(value), false);
  if (!grad_enabled()) return out;
  bool any = false;
  for (const Tensor<T>* in : inputs) any = any || (in->defined() && in->requires_grad());
  if (!any) return out;
  Node<T>* n = out.node();
  n->requires_grad = true;
  n->op = op;
  for (const Tensor<T>* in : inputs) {
    if (in->defined()) n->inputs.push_back(in->node_ptr());
  }
  n->backward = std::move(backward);
  return out;
}

template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> value, const std::vector<Tensor<T>>& inputs, const char* op,
                      std::function<void(Node<T>&)> backward) {
  Tensor<T> out(std::move(shape), std::move(value), false);
  if (!grad_enabled()) return out;
  bool any = false;
  for (const auto& in : inputs) any = any || in.requires_grad();
  if (!any) return out;
  Node<T>* n = out.node();
  n->requires_grad = true;
  n->op = op;
  for (const auto& in : inputs) n->inputs.push_back(in.node_ptr());
  n->backward = std::move(backward);
  return out;
}

}  // namespace detail

/// Converts between precisions; the result is a fresh leaf.
template <typename To, typename From>
Tensor<To> cast(const Tensor<From>& x) {
  std::vector<To> v(x.data().begin(), x.data().end());
  return Tensor<To>(x.shape(), std::move(v));
}

}  // namespace texrect
