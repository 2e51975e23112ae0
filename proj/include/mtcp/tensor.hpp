#pragma once

#include <cstddef>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace mtcp {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {
struct TensorStorage {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // non-empty iff requires_grad
  bool requires_grad = false;
};
}  // namespace detail

/// Dense row-major tensor of doubles with an optional gradient buffer.
///
/// Tensor is a shared handle: copies alias the same storage, which is what
/// lets the tape write gradients back into parameters and activations.
/// Use clone() for a deep copy.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(impl_); }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const { return impl_->data.size(); }

  std::span<double> values() { return impl_->data; }
  std::span<const double> values() const { return impl_->data; }
  /// Gradient buffer. Shallow-const like the handle itself: the backward
  /// closures hold const handles and accumulate through them.
  std::span<double> grad() const { return impl_->grad; }

  double& operator[](std::size_t i) { return impl_->data[i]; }
  double operator[](std::size_t i) const { return impl_->data[i]; }
  double at(std::initializer_list<std::size_t> index) const;
  double grad_at(std::initializer_list<std::size_t> index) const;

  /// Value of a single-element tensor.
  double item() const;

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool flag);
  void zero_grad();

  Tensor clone() const;
  /// Same values, no gradient, not connected to any tape.
  Tensor detach() const;

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorStorage> impl) : impl_(std::move(impl)) {}
  std::size_t flat_index(std::initializer_list<std::size_t> index) const;

  std::shared_ptr<detail::TensorStorage> impl_;
};

}  // namespace mtcp
