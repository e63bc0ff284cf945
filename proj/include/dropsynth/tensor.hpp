#pragma once

#include <cstddef>
#include <initializer_list>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace dropsynth {

// Element type for every network tensor. Double keeps finite-difference
// checks on second-order gradients meaningful.
using Scalar = double;

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

// Dense row-major array with value semantics. Image batches use NCHW.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, Scalar fill = 0);
  Tensor(Shape shape, std::vector<Scalar> data);
  Tensor(std::initializer_list<std::size_t> shape, Scalar fill = 0)
      : Tensor(Shape(shape), fill) {}

  static Tensor randn(Shape shape, std::mt19937_64& rng, Scalar stddev = 1);
  static Tensor uniform(Shape shape, std::mt19937_64& rng, Scalar lo, Scalar hi);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }
  std::span<Scalar> values() { return data_; }
  std::span<const Scalar> values() const { return data_; }

  Scalar& operator[](std::size_t i) { return data_[i]; }
  Scalar operator[](std::size_t i) const { return data_[i]; }

  // NCHW element access; only valid for rank-4 tensors.
  Scalar& at(std::size_t n, std::size_t c, std::size_t y, std::size_t x);
  Scalar at(std::size_t n, std::size_t c, std::size_t y, std::size_t x) const;

  // Same data, new shape with equal element count.
  Tensor reshaped(Shape shape) const&;
  Tensor reshaped(Shape shape) &&;

  Scalar sum() const;
  Scalar min() const;
  Scalar max() const;
  bool all_finite() const;

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_;
  std::vector<Scalar> data_;
};

// Largest absolute elementwise difference; shapes must match.
Scalar max_abs_diff(const Tensor& a, const Tensor& b);

}  // namespace dropsynth
