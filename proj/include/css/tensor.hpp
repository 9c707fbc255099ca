#pragma once

// Dense row-major float64 tensors with define-by-run reverse-mode
// differentiation. A Tensor is a shared handle: copies alias the same
// storage, detach() makes an independent value copy.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "css/error.hpp"

namespace css {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
  std::size_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

namespace detail {

struct Node;

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until a backward pass reaches it
  bool requires_grad = false;
  bool consumed = false;  // interior result whose graph was already traversed
  std::shared_ptr<Node> creator;

  bool is_leaf() const { return creator == nullptr; }

  double* ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
    return grad.data();
  }
};

/// One recorded operation. The backward rule reads out.grad and accumulates
/// into the inputs through grad_of(), which returns nullptr for inputs that
/// do not participate in differentiation.
struct Node {
  std::string op;
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  std::function<void(const TensorImpl& out, Node& self)> backward;

  double* grad_of(std::size_t i) {
    auto& in = *inputs[i];
    return in.requires_grad ? in.ensure_grad() : nullptr;
  }
};

inline bool& grad_disabled() {
  thread_local bool disabled = false;
  return disabled;
}

}  // namespace detail

/// RAII guard that suspends graph recording on the current thread.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_disabled()) { detail::grad_disabled() = true; }
  ~NoGradGuard() { detail::grad_disabled() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false) {
    if (css::numel(shape) != values.size()) {
      throw ShapeError("tensor shape " + shape_str(shape) + " holds " +
                       std::to_string(css::numel(shape)) + " elements, got " +
                       std::to_string(values.size()));
    }
    for (auto d : shape) {
      if (d == 0) throw ShapeError("zero-sized dimension in shape " + shape_str(shape));
    }
    auto impl = std::make_shared<detail::TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(values);
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const auto n = css::numel(shape);
    return from(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }

  static Tensor full(Shape shape, double value, bool requires_grad = false) {
    const auto n = css::numel(shape);
    return from(std::move(shape), std::vector<double>(n, value), requires_grad);
  }

  static Tensor scalar(double v, bool requires_grad = false) {
    return from({1}, {v}, requires_grad);
  }

  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t ndim() const { return impl_->shape.size(); }
  std::size_t numel() const { return impl_->data.size(); }

  /// Dimension size; negative indices count from the end.
  std::size_t dim(int i) const {
    const int n = static_cast<int>(ndim());
    const int j = i < 0 ? n + i : i;
    if (j < 0 || j >= n) throw ShapeError("dimension index out of range for " + shape_str(shape()));
    return impl_->shape[static_cast<std::size_t>(j)];
  }

  std::span<const double> data() const { return impl_->data; }
  /// Mutable access to the values. Meant for leaves (parameters, inputs);
  /// mutating a recorded intermediate invalidates its backward rule.
  std::span<double> mutable_data() { return impl_->data; }

  double item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return impl_->data[0];
  }

  double operator[](std::size_t i) const { return impl_->data[i]; }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool on) { impl_->requires_grad = on; }

  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const double> grad() const { return impl_->grad; }
  std::span<double> mutable_grad() { return {impl_->ensure_grad(), impl_->data.size()}; }
  void zero_grad() { impl_->grad.clear(); }

  /// Independent value copy with no graph history.
  Tensor detach() const { return from(shape(), impl_->data, false); }

  bool is_leaf() const { return impl_->is_leaf(); }

  detail::TensorImpl* impl() const { return impl_.get(); }
  const std::shared_ptr<detail::TensorImpl>& impl_ptr() const { return impl_; }

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

namespace detail {

/// Creates an op result and records its node when any input needs grad.
inline Tensor make_result(Shape shape, std::vector<double> values, const char* op,
                          std::vector<Tensor> inputs,
                          std::function<void(const TensorImpl&, Node&)> backward) {
  Tensor out = Tensor::from(std::move(shape), std::move(values));
  if (grad_disabled()) return out;
  bool any = false;
  for (const auto& t : inputs) any = any || t.requires_grad();
  if (!any) return out;
  auto node = std::make_shared<Node>();
  node->op = op;
  node->inputs.reserve(inputs.size());
  for (const auto& t : inputs) {
    if (t.impl()->consumed) {
      throw ContractError(std::string(op) + ": input belongs to an already-consumed graph");
    }
    node->inputs.push_back(t.impl_ptr());
  }
  node->backward = std::move(backward);
  out.impl()->creator = std::move(node);
  out.set_requires_grad(true);
  return out;
}

}  // namespace detail

/// The recorded operations reachable from a root, in topological order
/// (every node's inputs precede it).
struct ComputationGraph {
  std::vector<detail::TensorImpl*> order;

  static ComputationGraph from_root(const Tensor& root) {
    ComputationGraph g;
    std::unordered_set<detail::TensorImpl*> seen;
    // Iterative post-order DFS.
    std::vector<std::pair<detail::TensorImpl*, std::size_t>> stack;
    stack.emplace_back(root.impl(), 0);
    seen.insert(root.impl());
    while (!stack.empty()) {
      auto& [t, next] = stack.back();
      const auto n_in = t->creator ? t->creator->inputs.size() : 0;
      if (next < n_in) {
        auto* child = t->creator->inputs[next++].get();
        if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
      } else {
        g.order.push_back(t);
        stack.pop_back();
      }
    }
    return g;
  }

  std::size_t recorded_ops() const {
    std::size_t n = 0;
    for (auto* t : order) n += t->creator ? 1 : 0;
    return n;
  }
};

/// Reverse-mode pass from a scalar root. Gradients accumulate into leaves;
/// the interior of the graph is released afterwards, so each recording
/// supports exactly one traversal.
inline void backward(const Tensor& loss) {
  if (!loss.defined()) throw ContractError("backward on undefined tensor");
  if (loss.numel() != 1) {
    throw ContractError("backward requires a scalar root, got shape " + shape_str(loss.shape()));
  }
  if (loss.impl()->consumed) throw ContractError("backward: graph already consumed");
  if (!loss.requires_grad()) {
    throw ContractError("backward: root is not connected to any tensor requiring grad");
  }
  auto graph = ComputationGraph::from_root(loss);
  loss.impl()->ensure_grad()[0] += 1.0;
  for (auto it = graph.order.rbegin(); it != graph.order.rend(); ++it) {
    auto* t = *it;
    if (t->creator && !t->grad.empty()) t->creator->backward(*t, *t->creator);
  }
  for (auto* t : graph.order) {
    if (t->creator) {
      t->creator.reset();
      t->grad.clear();
      t->grad.shrink_to_fit();
      t->consumed = true;
    }
  }
}

}  // namespace css
