#pragma once

#include <cstddef>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace lami {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);
std::size_t shape_size(const Shape& shape);

/// Dense row-major tensor of doubles.
///
/// Storage is shared between copies; writes through mutable_data() detach
/// the storage first, so a tensor handed to another owner never changes
/// underneath it.
class Tensor {
 public:
  Tensor();
  explicit Tensor(Shape shape);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor filled(Shape shape, double value);
  static Tensor scalar(double value);
  static Tensor matrix(std::size_t rows, std::size_t cols, std::initializer_list<double> values);
  static Tensor vector(std::span<const double> values);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_->size(); }
  std::size_t rows() const noexcept { return shape_.empty() ? 1 : shape_[0]; }
  std::size_t cols() const noexcept;

  std::span<const double> data() const noexcept { return *data_; }
  std::span<double> mutable_data();

  double operator[](std::size_t i) const noexcept { return (*data_)[i]; }
  double at(std::size_t r, std::size_t c) const noexcept { return (*data_)[r * cols() + c]; }
  double item() const;

  std::span<const double> row(std::size_t r) const noexcept {
    return data().subspan(r * cols(), cols());
  }

  bool requires_grad() const noexcept { return requires_grad_; }
  Tensor& set_requires_grad(bool flag) noexcept {
    requires_grad_ = flag;
    return *this;
  }

  Tensor reshaped(Shape shape) const;
  bool all_finite() const noexcept;
  bool same_storage(const Tensor& other) const noexcept { return data_ == other.data_; }

  /// Exact comparison of shape and every bit of the payload.
  bool bit_equal(const Tensor& other) const noexcept;

 private:
  Shape shape_;
  std::shared_ptr<std::vector<double>> data_;
  bool requires_grad_ = false;
};

// Plain (non-recording) kernels. Reductions run in fixed index order.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

/// Maximum absolute elementwise difference; shapes must match.
double max_abs_diff(const Tensor& a, const Tensor& b);

}  // namespace lami
