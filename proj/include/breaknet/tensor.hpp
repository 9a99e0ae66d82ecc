#pragma once

#include <cstdint>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace breaknet {

using Shape = std::vector<std::int64_t>;

/// Thrown when operand shapes violate an op's contract.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Thrown when a computation produces NaN/Inf or otherwise cannot proceed numerically.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::int64_t numel_of(const Shape& shape);
std::string shape_str(const Shape& shape);

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::uint64_t id = 0;  // tape position of the producing op, 0 for leaves
};

/// Dense row-major N-d array with optional gradient.
///
/// A Tensor is a shared handle: copies alias the same buffer. Use clone() for a
/// deep copy and detach() for a copy that is cut from the differentiation graph.
/// Canonical image layout is batch x channels x height x width.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor();
  explicit Tensor(Shape shape, T fill = T(0));
  Tensor(Shape shape, std::vector<T> data);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor full(Shape shape, T v) { return Tensor(std::move(shape), v); }
  static Tensor scalar(T v) { return Tensor(Shape{}, v); }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::int64_t dim(int axis) const;
  int rank() const { return static_cast<int>(node_->shape.size()); }
  std::int64_t numel() const { return static_cast<std::int64_t>(node_->data.size()); }

  std::span<T> data() { return node_->data; }
  std::span<const T> data() const { return node_->data; }
  T* ptr() { return node_->data.data(); }
  const T* ptr() const { return node_->data.data(); }
  T item() const;
  T& at(std::initializer_list<std::int64_t> idx);
  T at(std::initializer_list<std::int64_t> idx) const;

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool on);
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<T> grad() { return node_->grad; }
  std::span<const T> grad() const { return node_->grad; }
  void zero_grad();

  Tensor clone() const;
  Tensor detach() const;

  std::shared_ptr<TensorNode<T>> node() const { return node_; }
  explicit Tensor(std::shared_ptr<TensorNode<T>> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<TensorNode<T>> node_;
};

using Tensorf = Tensor<float>;
using Tensord = Tensor<double>;

extern template class Tensor<float>;
extern template class Tensor<double>;

/// Converts between precisions without attaching to the graph.
template <typename To, typename From>
Tensor<To> cast(const Tensor<From>& t) {
  std::vector<To> out(t.data().begin(), t.data().end());
  return Tensor<To>(t.shape(), std::move(out));
}

}  // namespace breaknet
