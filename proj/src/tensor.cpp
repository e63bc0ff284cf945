#include "dropsynth/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>

#include <fmt/format.h>
#include <fmt/ranges.h>

#include "dropsynth/error.hpp"

namespace dropsynth {

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) { return fmt::format("[{}]", fmt::join(shape, "x")); }

Tensor::Tensor(Shape shape, Scalar fill) : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<Scalar> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (data_.size() != shape_size(shape_)) {
    throw InvalidArgument(fmt::format("tensor data has {} elements, shape {} needs {}", data_.size(),
                                      shape_string(shape_), shape_size(shape_)));
  }
}

Tensor Tensor::randn(Shape shape, std::mt19937_64& rng, Scalar stddev) {
  Tensor t(std::move(shape));
  std::normal_distribution<Scalar> dist(0, stddev);
  for (auto& v : t.data_) v = dist(rng);
  return t;
}

Tensor Tensor::uniform(Shape shape, std::mt19937_64& rng, Scalar lo, Scalar hi) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<Scalar> dist(lo, hi);
  for (auto& v : t.data_) v = dist(rng);
  return t;
}

Scalar& Tensor::at(std::size_t n, std::size_t c, std::size_t y, std::size_t x) {
  return data_[((n * shape_[1] + c) * shape_[2] + y) * shape_[3] + x];
}

Scalar Tensor::at(std::size_t n, std::size_t c, std::size_t y, std::size_t x) const {
  return data_[((n * shape_[1] + c) * shape_[2] + y) * shape_[3] + x];
}

Tensor Tensor::reshaped(Shape shape) const& {
  Tensor copy = *this;
  return std::move(copy).reshaped(std::move(shape));
}

Tensor Tensor::reshaped(Shape shape) && {
  if (shape_size(shape) != data_.size()) {
    throw InvalidArgument(fmt::format("cannot reshape {} to {}", shape_string(shape_), shape_string(shape)));
  }
  shape_ = std::move(shape);
  return std::move(*this);
}

Scalar Tensor::sum() const { return std::accumulate(data_.begin(), data_.end(), Scalar{0}); }

Scalar Tensor::min() const { return data_.empty() ? 0 : *std::min_element(data_.begin(), data_.end()); }

Scalar Tensor::max() const { return data_.empty() ? 0 : *std::max_element(data_.begin(), data_.end()); }

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](Scalar v) { return std::isfinite(v); });
}

Scalar max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw InvalidArgument(fmt::format("shape mismatch {} vs {}", shape_string(a.shape()), shape_string(b.shape())));
  }
  Scalar worst = 0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

}  // namespace dropsynth
