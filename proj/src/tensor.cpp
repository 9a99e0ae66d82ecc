#include "breaknet/tensor.hpp"

#include <algorithm>
#include <sstream>

namespace breaknet {

std::int64_t numel_of(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) {
    if (d < 0) throw ShapeError("negative dimension in shape " + shape_str(shape));
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

template <typename T>
Tensor<T>::Tensor() = default;

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill) : node_(std::make_shared<TensorNode<T>>()) {
  node_->data.assign(static_cast<std::size_t>(numel_of(shape)), fill);
  node_->shape = std::move(shape);
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data) : node_(std::make_shared<TensorNode<T>>()) {
  if (static_cast<std::int64_t>(data.size()) != numel_of(shape)) {
    throw ShapeError("buffer of " + std::to_string(data.size()) + " elements does not match shape " +
                     shape_str(shape));
  }
  node_->data = std::move(data);
  node_->shape = std::move(shape);
}

template <typename T>
std::int64_t Tensor<T>::dim(int axis) const {
  const int r = rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(shape()));
  }
  return node_->shape[static_cast<std::size_t>(axis)];
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return node_->data[0];
}

namespace {
template <typename T>
std::size_t flat_index(const TensorNode<T>& n, std::initializer_list<std::int64_t> idx) {
  if (idx.size() != n.shape.size()) {
    throw ShapeError("index rank " + std::to_string(idx.size()) + " does not match shape " + shape_str(n.shape));
  }
  std::size_t flat = 0;
  std::size_t axis = 0;
  for (auto i : idx) {
    if (i < 0 || i >= n.shape[axis]) throw ShapeError("index out of range for shape " + shape_str(n.shape));
    flat = flat * static_cast<std::size_t>(n.shape[axis]) + static_cast<std::size_t>(i);
    ++axis;
  }
  return flat;
}
}  // namespace

template <typename T>
T& Tensor<T>::at(std::initializer_list<std::int64_t> idx) {
  return node_->data[flat_index(*node_, idx)];
}

template <typename T>
T Tensor<T>::at(std::initializer_list<std::int64_t> idx) const {
  return node_->data[flat_index(*node_, idx)];
}

template <typename T>
Tensor<T>& Tensor<T>::set_requires_grad(bool on) {
  node_->requires_grad = on;
  return *this;
}

template <typename T>
void Tensor<T>::zero_grad() {
  std::fill(node_->grad.begin(), node_->grad.end(), T(0));
}

template <typename T>
Tensor<T> Tensor<T>::clone() const {
  Tensor out(node_->shape, node_->data);
  out.node_->requires_grad = node_->requires_grad;
  return out;
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  return Tensor(node_->shape, node_->data);
}

template class Tensor<float>;
template class Tensor<double>;

}  // namespace breaknet
