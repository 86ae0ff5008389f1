#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace sct {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_to_string(const Shape& shape);

// How `backward` treats gradients already stored on leaf tensors.
enum class GradMode {
  kReset,       // zero every reachable gradient first (default)
  kAccumulate,  // add into existing leaf gradients
};

namespace detail {

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until something is accumulated
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads `self.grad` and accumulates into the captured parents.
  std::function<void(Node& self)> backward;

  T* grad_buffer() {
    if (grad.size() != value.size()) grad.assign(value.size(), T{0});
    return grad.data();
  }
};

bool grad_recording_enabled();

}  // namespace detail

// Disables graph recording on the current thread for the guard's lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Dense row-major tensor that participates in a reverse-mode graph.
//
// Tensor is a handle: copies share storage and graph position. Use `clone()`
// for an independent leaf with the same values.
template <typename T>
class Tensor {
 public:
  using value_type = T;
  using NodePtr = std::shared_ptr<detail::Node<T>>;

  Tensor() = default;
  explicit Tensor(Shape shape, bool requires_grad = false);
  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false);

  static Tensor full(Shape shape, T value, bool requires_grad = false);
  static Tensor scalar(T value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t numel() const { return node_->value.size(); }

  std::span<const T> data() const { return node_->value; }
  // In-place access for leaves (parameter updates, finite differences).
  std::span<T> mutable_data() { return node_->value; }
  T item() const;
  T at(std::size_t flat_index) const { return node_->value.at(flat_index); }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool flag);
  bool has_grad() const { return node_->grad.size() == node_->value.size(); }
  // Empty span when no gradient has been accumulated.
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return std::span<T>(node_->grad_buffer(), numel()); }
  void zero_grad();

  // Propagates d(this)/d(leaf) into every tracked leaf. `this` must be scalar.
  void backward(GradMode mode = GradMode::kReset) const;

  // Independent leaf copy (no graph, no gradient).
  Tensor clone() const;
  Tensor detach() const { return clone(); }

  const NodePtr& node() const { return node_; }

  // Builds an op result. The graph edge is recorded only when recording is on
  // and at least one parent requires a gradient; otherwise `backward_fn` is
  // dropped and the result is a plain constant.
  static Tensor from_op(Shape shape, std::vector<T> values, std::vector<Tensor> parents,
                        std::function<void(detail::Node<T>&)> backward_fn);

 private:
  explicit Tensor(NodePtr node) : node_(std::move(node)) {}
  NodePtr node_;
};

// A tensor with a stable dotted name, e.g. "encoder0.block1.mlp_in.weight".
template <typename T>
struct NamedParameter {
  std::string name;
  Tensor<T> tensor;
};

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace sct
