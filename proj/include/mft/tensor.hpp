#pragma once

#include <cstddef>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace mft {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct TensorImpl {
  Shape shape;
  std::vector<float> data;
  std::vector<float> grad;  // empty until the first backward pass reaches it
  bool requires_grad = false;
  bool is_leaf = true;
};

/// Dense row-major float32 tensor with shared ownership.
///
/// Copies of a Tensor alias the same storage; use clone() for a deep copy.
/// Values produced by ops are immutable; only leaves (parameters) are updated
/// in place by optimizers.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, float value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<float> values, bool requires_grad = false);
  static Tensor scalar(float value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t ndim() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const float> data() const;
  std::span<float> mutable_data();
  float item() const;
  float operator[](std::size_t i) const { return data()[i]; }

  bool requires_grad() const;
  void set_requires_grad(bool flag);
  bool is_leaf() const;

  bool has_grad() const;
  std::span<const float> grad() const;
  std::span<float> mutable_grad();  // allocates a zero buffer on first use
  void zero_grad();

  /// Deep copy: new storage, same values and requires_grad flag, no grad.
  Tensor clone() const;
  /// Deep copy that never participates in autograd.
  Tensor detach() const;

  TensorImpl* id() const { return impl_.get(); }
  const std::shared_ptr<TensorImpl>& impl() const { return impl_; }

  static Tensor wrap(std::shared_ptr<TensorImpl> impl);

 private:
  std::shared_ptr<TensorImpl> impl_;
};

/// Throws NumericError when any value is NaN or infinite.
void check_finite(std::span<const float> values, const char* where);

bool bit_equal(const Tensor& a, const Tensor& b);

}  // namespace mft
