// Dense float64 tensors with reverse-mode differentiation.
//
// A Tensor is a cheap handle to an immutable node. Ops create new nodes and,
// when any input tracks gradients, record their parents together with a
// backward closure. backward() on a scalar walks the recorded graph in
// reverse topological order and accumulates d(loss)/d(node) into every node
// that tracks gradients. Leaf gradients accumulate across calls until
// zero_grad() is invoked.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_set>
#include <utility>
#include <vector>

#include "moon/error.hpp"

namespace moon {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ')';
  return os.str();
}

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;  // empty until a backward pass reaches the node
  bool requires_grad = false;
  std::string_view op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  // Receives this node and d(loss)/d(this); accumulates into the parents' gradients.
  std::function<void(const Node&, std::span<const double>)> backward;

  std::span<double> ensure_grad() {
    if (grad.empty()) grad.assign(values.size(), 0.0);
    return grad;
  }
};

// Per-thread diagnostics. Graphs are single-threaded, so thread-local state
// keeps concurrently evaluated graphs independent.
struct Diagnostics {
  std::string first_nonfinite_op;
  std::string corrupt_backward_op;  // test hook: scales this op's backward by 1.5
};

inline Diagnostics& diagnostics() {
  thread_local Diagnostics d;
  return d;
}

inline bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

}  // namespace detail

// Name of the first op on this thread that produced a non-finite value from
// finite inputs since the last reset, or empty.
inline const std::string& first_nonfinite_op() { return detail::diagnostics().first_nonfinite_op; }
inline void reset_nonfinite_tracking() { detail::diagnostics().first_nonfinite_op.clear(); }

// Test hook used by the gradient checker's self-test.
inline void set_corrupt_backward_op(std::string op) { detail::diagnostics().corrupt_backward_op = std::move(op); }

class Tensor {
 public:
  Tensor() = default;

  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false) {
    validate_shape(shape);
    if (shape_size(shape) != values.size())
      throw ShapeError("tensor: shape " + shape_str(shape) + " needs " + std::to_string(shape_size(shape)) +
                       " values, got " + std::to_string(values.size()));
    auto node = std::make_shared<detail::Node>();
    node->shape = std::move(shape);
    node->values = std::move(values);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const auto n = shape_size(shape);
    return from(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }

  static Tensor full(Shape shape, double value, bool requires_grad = false) {
    const auto n = shape_size(shape);
    return from(std::move(shape), std::vector<double>(n, value), requires_grad);
  }

  static Tensor scalar(double value, bool requires_grad = false) { return from({1}, {value}, requires_grad); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node().shape; }
  std::size_t rank() const { return node().shape.size(); }
  std::size_t dim(std::size_t axis) const { return node().shape.at(axis); }
  std::size_t size() const { return node().values.size(); }
  std::span<const double> values() const { return node().values; }
  double operator[](std::size_t i) const { return node().values[i]; }
  double item() const {
    if (size() != 1) throw ShapeError("item: tensor of shape " + shape_str(shape()) + " is not a scalar");
    return node().values[0];
  }

  bool requires_grad() const { return node().requires_grad; }
  std::string_view op() const { return node().op; }
  bool is_leaf() const { return node().backward == nullptr; }

  // Parameter storage for optimizers and initializers. Only valid on leaves:
  // values reachable through a recorded graph must not change under it.
  std::span<double> mutable_values() {
    if (!is_leaf()) throw Error("mutable_values: only leaf tensors are writable");
    return node().values;
  }

  bool has_grad() const { return !node().grad.empty(); }
  std::span<const double> grad() const {
    if (node().grad.empty()) throw Error("grad: no gradient recorded for this tensor");
    return node().grad;
  }
  void zero_grad() { node().grad.clear(); }

  // A leaf copy sharing no graph with this tensor.
  Tensor detach(bool requires_grad = false) const { return from(shape(), node().values, requires_grad); }

  void backward() const;

  // Op construction. Used by the primitives in ops.hpp.
  using BackwardFn = std::function<void(const detail::Node&, std::span<const double>)>;
  static Tensor make(std::string_view op, Shape shape, std::vector<double> values,
                     std::initializer_list<const Tensor*> inputs, BackwardFn backward) {
    std::vector<const Tensor*> in(inputs);
    return make(op, std::move(shape), std::move(values), in, std::move(backward));
  }

  static Tensor make(std::string_view op, Shape shape, std::vector<double> values,
                     const std::vector<const Tensor*>& inputs, BackwardFn backward) {
    auto node = std::make_shared<detail::Node>();
    node->shape = std::move(shape);
    node->values = std::move(values);
    node->op = op;
    auto& diag = detail::diagnostics();
    if (diag.first_nonfinite_op.empty() && !detail::all_finite(node->values)) {
      const bool inputs_finite =
          std::all_of(inputs.begin(), inputs.end(), [](const Tensor* t) { return detail::all_finite(t->values()); });
      if (inputs_finite) diag.first_nonfinite_op = std::string(op);
    }
    const bool track = std::any_of(inputs.begin(), inputs.end(), [](const Tensor* t) { return t->requires_grad(); });
    if (track) {
      node->requires_grad = true;
      node->parents.reserve(inputs.size());
      for (const Tensor* t : inputs) node->parents.push_back(t->node_);
      node->backward = std::move(backward);
    }
    return Tensor(std::move(node));
  }

  // Raw node access for backward closures.
  detail::Node* raw() const { return node_.get(); }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

  static void validate_shape(const Shape& shape) {
    if (shape.empty()) throw ShapeError("tensor: shape must have at least one axis");
    for (auto d : shape)
      if (d == 0) throw ShapeError("tensor: zero-length axis in shape " + shape_str(shape));
  }

  detail::Node& node() const {
    if (!node_) throw Error("tensor: use of undefined tensor");
    return *node_;
  }

  std::shared_ptr<detail::Node> node_;
};

inline void Tensor::backward() const {
  if (size() != 1) throw ShapeError("backward: loss must be a scalar, got shape " + shape_str(shape()));
  if (!requires_grad() || is_leaf()) throw Error("backward: no recorded computation graph");

  // Reverse topological order by iterative post-order DFS.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> visited;
  std::vector<std::pair<detail::Node*, std::size_t>> stack{{node_.get(), 0}};
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      detail::Node* p = n->parents[next++].get();
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  // Intermediate gradients from an earlier pass over a shared subgraph are stale.
  for (auto* n : order)
    if (n->backward) n->grad.clear();
  node_->ensure_grad()[0] += 1.0;

  const auto& corrupt = detail::diagnostics().corrupt_backward_op;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* n = *it;
    if (!n->backward || n->grad.empty()) continue;
    if (!corrupt.empty() && n->op == corrupt) {
      std::vector<double> scaled(n->grad);
      for (auto& g : scaled) g *= 1.5;
      n->backward(*n, scaled);
    } else {
      n->backward(*n, n->grad);
    }
  }
}

}  // namespace moon
