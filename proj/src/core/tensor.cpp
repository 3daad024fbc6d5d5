#include "mdt/tensor.h"

#include <cmath>
#include <sstream>

namespace mdt {

std::string shape_to_string(const std::vector<std::size_t>& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << 'x';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

Tensor make_tensor(Shape shape, std::vector<real> values, bool requires_grad) {
  for (auto d : shape) {
    if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_to_string(shape));
  }
  if (shape_numel(shape) != values.size()) {
    throw ShapeError("shape " + shape_to_string(shape) + " does not hold " +
                     std::to_string(values.size()) + " values");
  }
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(values);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  auto n = shape_numel(shape);
  return make_tensor(std::move(shape), std::vector<real>(n, 0.0f), requires_grad);
}

Tensor Tensor::full(Shape shape, real value, bool requires_grad) {
  auto n = shape_numel(shape);
  return make_tensor(std::move(shape), std::vector<real>(n, value), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<real> values, bool requires_grad) {
  return make_tensor(std::move(shape), std::move(values), requires_grad);
}

Tensor Tensor::scalar(real value, bool requires_grad) {
  return make_tensor({1}, {value}, requires_grad);
}

TensorImpl& Tensor::impl() const {
  if (!impl_) throw ContractError("use of an undefined tensor");
  return *impl_;
}

const Shape& Tensor::shape() const { return impl().shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_to_string(s));
  }
  return s[axis];
}

std::size_t Tensor::numel() const { return impl().data.size(); }

std::span<real> Tensor::data() { return impl().data; }
std::span<const real> Tensor::data() const { return impl().data; }
std::vector<real> Tensor::to_vector() const { return impl().data; }

real Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_to_string(shape()));
  return impl().data[0];
}

bool Tensor::requires_grad() const { return impl().requires_grad; }
void Tensor::set_requires_grad(bool on) { impl().requires_grad = on; }
bool Tensor::has_grad() const { return impl().grad.size() == impl().data.size(); }
std::span<const real> Tensor::grad() const { return impl().grad; }

std::span<real> Tensor::mutable_grad() {
  impl().ensure_grad();
  return impl().grad;
}

void Tensor::zero_grad() { impl().grad.clear(); }

Tensor Tensor::clone() const {
  auto t = make_tensor(shape(), impl().data, requires_grad());
  t.impl().grad = impl().grad;
  return t;
}

Tensor Tensor::detach() const { return make_tensor(shape(), impl().data, false); }

void Tensor::check_finite(const std::string& what) const {
  for (real v : impl().data) {
    if (!std::isfinite(v)) throw NumericError("non-finite value in " + what);
  }
}

}  // namespace mdt
