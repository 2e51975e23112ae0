#include "mtcp/tensor.hpp"

#include <algorithm>
#include <sstream>

#include "mtcp/errors.hpp"

namespace mtcp {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  auto impl = std::make_shared<detail::TensorStorage>();
  impl->data.assign(shape_numel(shape), value);
  impl->shape = std::move(shape);
  Tensor t(std::move(impl));
  t.set_requires_grad(requires_grad);
  return t;
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  if (shape_numel(shape) != values.size()) {
    throw DimensionError("Tensor::from: shape " + shape_str(shape) + " holds " +
                         std::to_string(shape_numel(shape)) + " elements, got " +
                         std::to_string(values.size()));
  }
  auto impl = std::make_shared<detail::TensorStorage>();
  impl->shape = std::move(shape);
  impl->data = std::move(values);
  Tensor t(std::move(impl));
  t.set_requires_grad(requires_grad);
  return t;
}

Tensor Tensor::scalar(double value, bool requires_grad) { return full(Shape{1}, value, requires_grad); }

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= rank()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape()));
  }
  return impl_->shape[axis];
}

std::size_t Tensor::flat_index(std::initializer_list<std::size_t> index) const {
  if (index.size() != rank()) {
    throw DimensionError("index rank " + std::to_string(index.size()) + " vs tensor " + shape_str(shape()));
  }
  std::size_t flat = 0;
  std::size_t axis = 0;
  for (std::size_t i : index) {
    if (i >= impl_->shape[axis]) throw DimensionError("index out of range for " + shape_str(shape()));
    flat = flat * impl_->shape[axis] + i;
    ++axis;
  }
  return flat;
}

double Tensor::at(std::initializer_list<std::size_t> index) const { return impl_->data[flat_index(index)]; }

double Tensor::grad_at(std::initializer_list<std::size_t> index) const {
  if (!requires_grad()) throw StateError("grad_at on a tensor without gradient");
  return impl_->grad[flat_index(index)];
}

double Tensor::item() const {
  if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
  return impl_->data[0];
}

void Tensor::set_requires_grad(bool flag) {
  impl_->requires_grad = flag;
  if (flag) {
    impl_->grad.assign(impl_->data.size(), 0.0);
  } else {
    impl_->grad.clear();
    impl_->grad.shrink_to_fit();
  }
}

void Tensor::zero_grad() { std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0); }

Tensor Tensor::clone() const {
  auto impl = std::make_shared<detail::TensorStorage>(*impl_);
  return Tensor(std::move(impl));
}

Tensor Tensor::detach() const { return from(shape(), impl_->data, false); }

}  // namespace mtcp
