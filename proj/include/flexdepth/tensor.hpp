#pragma once

// Dense float32 tensors with define-by-run reverse-mode differentiation.
//
// Every op that receives at least one input with requires_grad (while grad
// mode is enabled) records its parents and a backward rule on the output
// node. Node ids come from a process-wide monotonic counter, so sorting by
// id yields a topological order. Tensor::backward() walks the ancestors of a
// scalar loss in reverse id order, then releases the recorded graph.

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <unordered_set>
#include <utility>
#include <vector>

#include "flexdepth/errors.hpp"

namespace flexdepth {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

namespace detail {

inline std::atomic<std::uint64_t>& node_counter() {
  static std::atomic<std::uint64_t> counter{0};
  return counter;
}

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

struct Node {
  using BackwardFn = std::function<void(Node&)>;

  Shape shape;
  std::vector<float> data;
  std::vector<float> grad;  // empty until a gradient reaches this node
  bool requires_grad = false;
  bool backward_done = false;
  std::uint64_t id = node_counter().fetch_add(1, std::memory_order_relaxed);
  std::vector<std::shared_ptr<Node>> parents;
  BackwardFn backward_fn;

  std::span<float> grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), 0.0f);
    return grad;
  }
};

}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<float> data, bool requires_grad = false)
      : node_(std::make_shared<detail::Node>()) {
    if (shape_numel(shape) != data.size()) {
      throw DimensionError("tensor data length " + std::to_string(data.size()) +
                           " does not match shape " + shape_string(shape));
    }
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const std::size_t n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<float>(n, 0.0f), requires_grad);
  }

  static Tensor full(Shape shape, float value, bool requires_grad = false) {
    const std::size_t n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<float>(n, value), requires_grad);
  }

  static Tensor scalar(float value, bool requires_grad = false) {
    return Tensor({}, {value}, requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t numel() const { return node_->data.size(); }
  std::uint64_t id() const { return node_->id; }
  bool requires_grad() const { return node_->requires_grad; }

  std::span<const float> data() const { return node_->data; }

  /// In-place access. Only meant for leaves (parameter updates, test
  /// perturbations); mutating an interior node invalidates its graph.
  std::span<float> mutable_data() { return node_->data; }

  bool has_grad() const { return !node_->grad.empty(); }

  /// Gradient; an all-zero view is never materialized, so check has_grad().
  std::span<const float> grad() const { return node_->grad; }

  void zero_grad() { node_->grad.clear(); }

  float item() const {
    if (numel() != 1) {
      throw DimensionError("item() needs a single-element tensor, got " + shape_string(shape()));
    }
    return node_->data[0];
  }

  /// Detached deep copy: same values, fresh node, no history.
  Tensor clone(bool requires_grad = false) const {
    return Tensor(node_->shape, node_->data, requires_grad);
  }

  /// Populates grad on every requires_grad ancestor of this scalar, then
  /// frees the recorded graph. A second call on the same loss throws.
  void backward() const {
    if (numel() != 1) {
      throw DimensionError("backward() needs a scalar loss, got " + shape_string(shape()));
    }
    if (node_->backward_done) {
      throw GraphError("backward() already ran on this graph");
    }
    if (!node_->requires_grad) {
      throw GraphError("loss does not depend on any tensor that requires grad");
    }

    // Shared handles keep every visited node alive until the graph is released.
    std::vector<std::shared_ptr<detail::Node>> order;
    std::unordered_set<detail::Node*> seen;
    std::vector<std::shared_ptr<detail::Node>> stack{node_};
    seen.insert(node_.get());
    while (!stack.empty()) {
      auto current = std::move(stack.back());
      stack.pop_back();
      for (const auto& parent : current->parents) {
        if (parent->requires_grad && seen.insert(parent.get()).second) stack.push_back(parent);
      }
      order.push_back(std::move(current));
    }
    std::sort(order.begin(), order.end(),
              [](const auto& a, const auto& b) { return a->id > b->id; });

    node_->grad_buffer()[0] += 1.0f;
    for (const auto& node : order) {
      if (node->backward_fn && !node->grad.empty()) node->backward_fn(*node);
    }
    for (const auto& node : order) {
      if (node->backward_fn) {
        node->backward_fn = nullptr;
        node->parents.clear();
        node->backward_done = true;
      }
    }
    node_->backward_done = true;
  }

  // Graph plumbing used by the op library.
  const std::shared_ptr<detail::Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

namespace detail {

/// Builds an op result. The backward rule is attached only when some input
/// requires grad and grad mode is on.
inline Tensor make_result(Shape shape, std::vector<float> data,
                          std::initializer_list<const Tensor*> inputs, Node::BackwardFn fn) {
  Tensor out(std::move(shape), std::move(data));
  if (!grad_enabled()) return out;
  bool any = false;
  for (const Tensor* input : inputs) any = any || input->requires_grad();
  if (!any) return out;
  auto& node = *out.node();
  node.requires_grad = true;
  for (const Tensor* input : inputs) node.parents.push_back(input->node());
  node.backward_fn = std::move(fn);
  return out;
}

inline Tensor make_result(Shape shape, std::vector<float> data, const std::vector<Tensor>& inputs,
                          Node::BackwardFn fn) {
  Tensor out(std::move(shape), std::move(data));
  if (!grad_enabled()) return out;
  bool any = false;
  for (const Tensor& input : inputs) any = any || input.requires_grad();
  if (!any) return out;
  auto& node = *out.node();
  node.requires_grad = true;
  for (const Tensor& input : inputs) node.parents.push_back(input.node());
  node.backward_fn = std::move(fn);
  return out;
}

/// Gradient sink for parent k, or an empty span when it takes no gradient.
inline std::span<float> parent_grad(Node& self, std::size_t k) {
  Node& parent = *self.parents[k];
  if (!parent.requires_grad) return {};
  return parent.grad_buffer();
}

}  // namespace detail

}  // namespace flexdepth
