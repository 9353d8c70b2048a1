#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cytograd/error.hpp"

namespace cytograd {

using Shape = std::vector<std::size_t>;

inline std::string to_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

inline std::size_t element_count(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

/// Dense row-major array of doubles. A scalar is a tensor of shape [1].
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0) : shape_(std::move(shape)) {
    check_shape(shape_);
    values_.assign(element_count(shape_), fill);
  }

  Tensor(Shape shape, std::vector<double> values)
      : shape_(std::move(shape)), values_(std::move(values)) {
    check_shape(shape_);
    if (element_count(shape_) != values_.size()) {
      throw DimensionError("tensor of shape " + to_string(shape_) + " needs " +
                           std::to_string(element_count(shape_)) + " values, got " +
                           std::to_string(values_.size()));
    }
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), 1.0); }
  static Tensor scalar(double v) { return Tensor(Shape{1}, std::vector<double>{v}); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return values_.size(); }
  bool empty() const noexcept { return values_.empty(); }

  std::span<double> values() noexcept { return values_; }
  std::span<const double> values() const noexcept { return values_; }
  double* data() noexcept { return values_.data(); }
  const double* data() const noexcept { return values_.data(); }

  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }

  double item() const {
    if (values_.size() != 1) {
      throw DimensionError("item() on tensor of shape " + to_string(shape_));
    }
    return values_[0];
  }

  Tensor reshaped(Shape shape) const {
    if (element_count(shape) != values_.size()) {
      throw DimensionError("cannot reshape " + to_string(shape_) + " to " + to_string(shape));
    }
    return Tensor(std::move(shape), values_);
  }

  bool all_finite() const noexcept {
    for (double v : values_) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  void fill(double v) { std::fill(values_.begin(), values_.end(), v); }

  /// this += scale * other
  void axpy(double scale, const Tensor& other) {
    if (other.shape_ != shape_) {
      throw DimensionError("axpy shape mismatch: " + to_string(shape_) + " vs " +
                           to_string(other.shape_));
    }
    for (std::size_t i = 0; i < values_.size(); ++i) values_[i] += scale * other.values_[i];
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  static void check_shape(const Shape& shape) {
    if (shape.empty()) throw DimensionError("tensor shape must have at least one dimension");
    for (std::size_t d : shape) {
      if (d == 0) throw DimensionError("tensor shape " + to_string(shape) + " has a zero dimension");
    }
  }

  Shape shape_;
  std::vector<double> values_;
};

}  // namespace cytograd
