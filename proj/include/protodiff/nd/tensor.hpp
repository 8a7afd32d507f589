#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace protodiff::nd {

using Shape = std::vector<std::size_t>;

/// Storage aligned for Eigen's packet loads. Vectorized reductions peel to
/// alignment, so unaligned storage would make rounding depend on the heap.
template <typename T>
using Buffer = std::vector<T, Eigen::aligned_allocator<T>>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

/// Raised when operands of a primitive have incompatible shapes.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when a forward primitive produces NaN or Inf from finite inputs.
class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

template <typename T>
struct Node {
  Shape shape;
  Buffer<T> value;
  // Empty until something accumulates into it (leaves with requires_grad are
  // allocated eagerly so an untouched parameter reports an all-zero gradient).
  Buffer<T> grad;
  bool requires_grad = false;
  bool is_leaf = true;
  const char* op = "leaf";
  std::function<void(Node&)> backward;

  T* grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), T(0));
    return grad.data();
  }
};

}  // namespace detail

/// Dense row-major array with optional reverse-mode gradient tracking.
///
/// Copies are shallow: two Tensor handles may refer to the same node. Values
/// are treated as immutable once produced by an op; mutable_data() exists for
/// parameter initialization and optimizer updates on leaves only.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape);
  Tensor(Shape shape, const std::vector<T>& values);
  static Tensor from_buffer(Shape shape, Buffer<T> values);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor full(Shape shape, T value);
  static Tensor scalar(T value) { return Tensor(Shape{}, std::vector<T>{value}); }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const { return node_->value.size(); }

  std::span<const T> data() const { return node_->value; }
  std::span<T> mutable_data();
  T item() const;

  bool requires_grad() const { return node_ && node_->requires_grad; }
  Tensor& set_requires_grad(bool on);
  bool is_leaf() const { return node_->is_leaf; }

  /// Accumulated gradient; empty span if nothing reached this node.
  std::span<const T> grad() const { return node_->grad; }
  void zero_grad();

  const std::shared_ptr<detail::Node<T>>& node() const { return node_; }
  static Tensor wrap(std::shared_ptr<detail::Node<T>> node);

 private:
  std::shared_ptr<detail::Node<T>> node_;
};

/// Ordered record of the non-leaf nodes built while the tape is active.
///
/// backward() walks the record once in reverse creation order, which is a
/// valid topological order because every op is recorded after its inputs.
template <typename T>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(std::shared_ptr<detail::Node<T>> node);
  std::size_t size() const { return nodes_.size(); }

  /// Seeds d(loss)/d(loss) = 1 and propagates into every reachable leaf.
  /// The tape is cleared afterwards; leaf gradients stay on the leaves.
  void backward(const Tensor<T>& loss);
  void clear();

  /// Number of node backward functions run by the last backward() call.
  std::size_t last_visits() const { return last_visits_; }

  static Tape* active();

 private:
  template <typename U>
  friend class TapeScope;
  static Tape*& active_slot();

  std::vector<std::shared_ptr<detail::Node<T>>> nodes_;
  std::size_t last_visits_ = 0;
};

/// Makes a tape the recording target for the current thread while in scope.
template <typename T>
class TapeScope {
 public:
  explicit TapeScope(Tape<T>& tape) : previous_(Tape<T>::active_slot()) {
    Tape<T>::active_slot() = &tape;
  }
  ~TapeScope() { Tape<T>::active_slot() = previous_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<T>* previous_;
};

extern template class Tensor<float>;
extern template class Tensor<double>;
extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace protodiff::nd
