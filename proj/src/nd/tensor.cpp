#include "protodiff/nd/tensor.hpp"

#include <algorithm>
#include <functional>
#include <numeric>
#include <sstream>

namespace protodiff::nd {

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string to_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << ", ";
    out << shape[i];
  }
  out << ']';
  return out.str();
}

template <typename T>
Tensor<T>::Tensor(Shape shape) : node_(std::make_shared<detail::Node<T>>()) {
  node_->value.assign(numel(shape), T(0));
  node_->shape = std::move(shape);
}

template <typename T>
Tensor<T>::Tensor(Shape shape, const std::vector<T>& values)
    : Tensor(from_buffer(std::move(shape), Buffer<T>(values.begin(), values.end()))) {}

template <typename T>
Tensor<T> Tensor<T>::from_buffer(Shape shape, Buffer<T> values) {
  if (numel(shape) != values.size()) {
    throw ShapeError("Tensor: shape " + to_string(shape) + " needs " +
                     std::to_string(numel(shape)) + " values, got " +
                     std::to_string(values.size()));
  }
  auto node = std::make_shared<detail::Node<T>>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  return wrap(std::move(node));
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value) {
  Tensor t(std::move(shape));
  std::fill(t.node_->value.begin(), t.node_->value.end(), value);
  return t;
}

template <typename T>
std::size_t Tensor<T>::dim(std::size_t axis) const {
  if (axis >= rank()) {
    throw ShapeError("dim: axis " + std::to_string(axis) + " out of range for shape " +
                     to_string(shape()));
  }
  return node_->shape[axis];
}

template <typename T>
std::span<T> Tensor<T>::mutable_data() {
  if (!node_->is_leaf) throw std::logic_error("mutable_data: only leaf tensors may be mutated");
  return node_->value;
}

template <typename T>
T Tensor<T>::item() const {
  if (size() != 1) {
    throw ShapeError("item: expected a single element, shape is " + to_string(shape()));
  }
  return node_->value[0];
}

template <typename T>
Tensor<T>& Tensor<T>::set_requires_grad(bool on) {
  if (!node_->is_leaf) throw std::logic_error("set_requires_grad: only valid on leaf tensors");
  node_->requires_grad = on;
  if (on) {
    node_->grad.assign(node_->value.size(), T(0));
  } else {
    node_->grad.clear();
  }
  return *this;
}

template <typename T>
void Tensor<T>::zero_grad() {
  if (node_->requires_grad && node_->is_leaf) {
    node_->grad.assign(node_->value.size(), T(0));
  } else {
    node_->grad.clear();
  }
}

template <typename T>
Tensor<T> Tensor<T>::wrap(std::shared_ptr<detail::Node<T>> node) {
  Tensor t;
  t.node_ = std::move(node);
  return t;
}

template <typename T>
Tape<T>*& Tape<T>::active_slot() {
  thread_local Tape<T>* slot = nullptr;
  return slot;
}

template <typename T>
Tape<T>* Tape<T>::active() {
  return active_slot();
}

template <typename T>
void Tape<T>::record(std::shared_ptr<detail::Node<T>> node) {
  nodes_.push_back(std::move(node));
}

template <typename T>
void Tape<T>::backward(const Tensor<T>& loss) {
  if (!loss.defined() || loss.size() != 1) {
    throw ShapeError("backward: loss must be a scalar, got shape " +
                     (loss.defined() ? to_string(loss.shape()) : std::string("<undefined>")));
  }
  if (!loss.requires_grad()) {
    throw std::logic_error("backward: loss does not depend on any tensor that requires grad");
  }
  auto& root = *loss.node();
  root.grad_buffer()[0] += T(1);
  last_visits_ = 0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    auto& node = **it;
    if (node.grad.empty() || !node.backward) continue;
    node.backward(node);
    ++last_visits_;
  }
  clear();
}

template <typename T>
void Tape<T>::clear() {
  // Dropping the closures releases saved activations and parent links.
  for (auto& node : nodes_) node->backward = nullptr;
  nodes_.clear();
}

template class Tensor<float>;
template class Tensor<double>;
template class Tape<float>;
template class Tape<double>;

}  // namespace protodiff::nd
