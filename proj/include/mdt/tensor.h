#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "mdt/errors.h"

namespace mdt {

using Shape = std::vector<std::size_t>;

// Activation and gradient precision. Parameters are held at float32
// precision regardless (the optimizer rounds after every update and
// checkpoints store float32), so a double build only widens the
// intermediate values.
#ifdef MDT_FLOAT32
using real = float;
#else
using real = double;
#endif

std::size_t shape_numel(const Shape& shape);

struct TensorImpl {
  Shape shape;
  std::vector<real> data;
  std::vector<real> grad;  // empty until a backward pass touches it
  bool requires_grad = false;
  // Identifier of the tape that produced this tensor, 0 when created outside
  // recorded ops.
  std::uint64_t tape_id = 0;

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0f);
  }
};

/// Dense row-major array with an optional gradient buffer.
///
/// Copies share storage; use clone() for a deep copy. Values produced by an
/// op are treated as immutable, only the optimizer writes parameters in place.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, real value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<real> values, bool requires_grad = false);
  static Tensor scalar(real value, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(impl_); }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<real> data();
  std::span<const real> data() const;
  std::vector<real> to_vector() const;
  real item() const;

  bool requires_grad() const;
  void set_requires_grad(bool on);
  bool has_grad() const;
  std::span<const real> grad() const;
  std::span<real> mutable_grad();
  void zero_grad();

  Tensor clone() const;
  Tensor detach() const;

  TensorImpl& impl() const;
  const std::shared_ptr<TensorImpl>& impl_ptr() const { return impl_; }

  /// Throws NumericError when any value is NaN or Inf.
  void check_finite(const std::string& what) const;

 private:
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}
  friend Tensor make_tensor(Shape shape, std::vector<real> values, bool requires_grad);

  std::shared_ptr<TensorImpl> impl_;
};

Tensor make_tensor(Shape shape, std::vector<real> values, bool requires_grad);

}  // namespace mdt
