#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace siamese {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Dense row-major tensor of doubles.
///
/// The element count always equals the product of the shape. A rank-0 shape
/// holds a single scalar.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double value);
  static Tensor zeros_like(const Tensor& other);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const noexcept { return data_.size(); }
  // Size of the trailing axis; 1 for scalars.
  std::size_t last_dim() const noexcept {
    return shape_.empty() ? 1 : shape_.back();
  }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  const std::vector<double>& values() const noexcept { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  const double& operator[](std::size_t i) const { return data_[i]; }
  double item() const;

  bool all_finite() const noexcept;
  Tensor reshaped(Shape shape) const;
  void fill(double value);

  // Row r of the tensor viewed as [numel / last_dim, last_dim].
  std::span<double> row(std::size_t r);
  std::span<const double> row(std::size_t r) const;
  std::size_t rows() const noexcept {
    return last_dim() == 0 ? 0 : numel() / last_dim();
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

double l2_norm(std::span<const double> values);
double max_abs_diff(const Tensor& a, const Tensor& b);

}  // namespace siamese
