#pragma once

// Numeric kernels behind the autograd ops and the feature extractors.
//
// Every kernel exists twice: the OpenMP implementation in `kernels` (used by
// the library) and a straightforward loop nest in `kernels::serial` kept as
// the reference for tests and the benchmark. Both take and return NCHW
// tensors; weights are OIHW.

#include <cstddef>

#include "dropsynth/tensor.hpp"

namespace dropsynth::kernels {

struct ConvGeometry {
  std::size_t stride = 1;
  std::size_t pad_h = 0;
  std::size_t pad_w = 0;

  static ConvGeometry same(std::size_t kernel) { return {1, kernel / 2, kernel / 2}; }
  friend bool operator==(const ConvGeometry&, const ConvGeometry&) = default;
};

Shape conv2d_output_shape(const Shape& x, const Shape& w, ConvGeometry g);

// Row-major C[M x N] (+)= op(A)[M x K] * op(B)[K x N]. `trans_a` means A is
// stored K x M; `trans_b` means B is stored N x K.
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const Scalar* a,
          std::size_t lda, const Scalar* b, std::size_t ldb, Scalar* c, std::size_t ldc, bool accumulate);

// Rank-2 product with optional transposes.
Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a = false, bool trans_b = false);

Tensor conv2d(const Tensor& x, const Tensor& w, ConvGeometry g);
Tensor conv2d_input_grad(const Tensor& grad_out, const Tensor& w, const Shape& x_shape, ConvGeometry g);
Tensor conv2d_weight_grad(const Tensor& x, const Tensor& grad_out, const Shape& w_shape, ConvGeometry g);

Tensor upsample_nearest2x(const Tensor& x);
// Sum of each 2x2 block; adjoint of upsample_nearest2x.
Tensor sum_pool2x(const Tensor& x);
Tensor max_pool2d(const Tensor& x, std::size_t kernel, std::size_t stride, std::size_t pad);
Tensor avg_pool2d(const Tensor& x, std::size_t kernel, std::size_t stride, std::size_t pad, bool count_include_pad);

// Area-weighted resampling to (out_h, out_w): every output pixel is the mean
// of the source region it covers, fractional pixels weighted by overlap.
Tensor area_resize(const Tensor& x, std::size_t out_h, std::size_t out_w);
Tensor bilinear_resize(const Tensor& x, std::size_t out_h, std::size_t out_w);

Tensor leaky_relu(const Tensor& x, Scalar slope);
// Elementwise derivative of leaky_relu (1 or slope).
Tensor leaky_relu_slope(const Tensor& x, Scalar slope);
// Divide each channel vector by sqrt(mean(x_c^2) + eps) per (n, y, x).
Tensor pixel_norm(const Tensor& x, Scalar eps);

// Numpy-style broadcasting (right-aligned, size-1 axes expand) and its adjoint.
Tensor broadcast_to(const Tensor& x, const Shape& shape);
Tensor sum_to(const Tensor& x, const Shape& shape);

Tensor concat_channels(const Tensor& a, const Tensor& b);
Tensor slice_channels(const Tensor& x, std::size_t begin, std::size_t end);
Tensor pad_channels(const Tensor& x, std::size_t before, std::size_t after);

namespace serial {

void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const Scalar* a,
          std::size_t lda, const Scalar* b, std::size_t ldb, Scalar* c, std::size_t ldc, bool accumulate);
Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a = false, bool trans_b = false);
Tensor conv2d(const Tensor& x, const Tensor& w, ConvGeometry g);
Tensor conv2d_input_grad(const Tensor& grad_out, const Tensor& w, const Shape& x_shape, ConvGeometry g);
Tensor conv2d_weight_grad(const Tensor& x, const Tensor& grad_out, const Shape& w_shape, ConvGeometry g);
Tensor upsample_nearest2x(const Tensor& x);
Tensor sum_pool2x(const Tensor& x);
Tensor max_pool2d(const Tensor& x, std::size_t kernel, std::size_t stride, std::size_t pad);
Tensor avg_pool2d(const Tensor& x, std::size_t kernel, std::size_t stride, std::size_t pad, bool count_include_pad);
Tensor area_resize(const Tensor& x, std::size_t out_h, std::size_t out_w);
Tensor leaky_relu(const Tensor& x, Scalar slope);
Tensor pixel_norm(const Tensor& x, Scalar eps);

}  // namespace serial

}  // namespace dropsynth::kernels
