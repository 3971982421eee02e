#include "mft/tensor.hpp"

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <sstream>

#include "mft/error.hpp"

namespace mft {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
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

Tensor Tensor::wrap(std::shared_ptr<TensorImpl> impl) {
  Tensor t;
  t.impl_ = std::move(impl);
  return t;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0f, requires_grad); }

Tensor Tensor::full(Shape shape, float value, bool requires_grad) {
  for (auto d : shape)
    if (d == 0) throw DimensionError("tensor shape " + shape_str(shape) + " has a zero extent");
  auto impl = std::make_shared<TensorImpl>();
  impl->data.assign(shape_numel(shape), value);
  impl->shape = std::move(shape);
  impl->requires_grad = requires_grad;
  return wrap(std::move(impl));
}

Tensor Tensor::from(Shape shape, std::vector<float> values, bool requires_grad) {
  for (auto d : shape)
    if (d == 0) throw DimensionError("tensor shape " + shape_str(shape) + " has a zero extent");
  if (shape_numel(shape) != values.size())
    throw DimensionError("tensor shape " + shape_str(shape) + " does not hold " + std::to_string(values.size()) +
                         " values");
  check_finite(values, "Tensor::from");
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(values);
  impl->requires_grad = requires_grad;
  return wrap(std::move(impl));
}

Tensor Tensor::scalar(float value, bool requires_grad) { return from({1}, {value}, requires_grad); }

const Shape& Tensor::shape() const {
  if (!impl_) throw ContractError("use of an undefined tensor");
  return impl_->shape;
}

std::size_t Tensor::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size())
    throw IndexError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(s));
  return s[axis];
}

std::size_t Tensor::numel() const { return shape_numel(shape()); }

std::span<const float> Tensor::data() const {
  if (!impl_) throw ContractError("use of an undefined tensor");
  return impl_->data;
}

std::span<float> Tensor::mutable_data() {
  if (!impl_) throw ContractError("use of an undefined tensor");
  return impl_->data;
}

float Tensor::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
  return impl_->data[0];
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

void Tensor::set_requires_grad(bool flag) {
  if (!impl_) throw ContractError("use of an undefined tensor");
  impl_->requires_grad = flag;
}

bool Tensor::is_leaf() const { return impl_ && impl_->is_leaf; }

bool Tensor::has_grad() const { return impl_ && !impl_->grad.empty(); }

std::span<const float> Tensor::grad() const {
  if (!impl_) throw ContractError("use of an undefined tensor");
  return impl_->grad;
}

std::span<float> Tensor::mutable_grad() {
  if (!impl_) throw ContractError("use of an undefined tensor");
  if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0f);
  return impl_->grad;
}

void Tensor::zero_grad() {
  if (impl_) impl_->grad.clear();
}

Tensor Tensor::clone() const {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = shape();
  impl->data = impl_->data;
  impl->requires_grad = impl_->requires_grad;
  return wrap(std::move(impl));
}

Tensor Tensor::detach() const {
  Tensor t = clone();
  t.impl_->requires_grad = false;
  return t;
}

void check_finite(std::span<const float> values, const char* where) {
  // An all-ones exponent marks Inf and NaN; the integer OR-reduction vectorizes.
  std::uint32_t bad = 0;
  for (float v : values) {
    const auto bits = std::bit_cast<std::uint32_t>(v);
    bad |= static_cast<std::uint32_t>((bits & 0x7f800000u) == 0x7f800000u);
  }
  if (bad) throw NumericError(std::string("non-finite value produced by ") + where);
}

bool bit_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  return std::memcmp(a.data().data(), b.data().data(), a.numel() * sizeof(float)) == 0;
}

}  // namespace mft
