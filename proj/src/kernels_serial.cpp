// Reference kernels: direct loop nests with no blocking, packing or threads.
// They define the expected results for the OpenMP kernels in kernels.cpp.

#include <algorithm>
#include <cmath>
#include <limits>

#include <fmt/format.h>

#include "dropsynth/error.hpp"
#include "dropsynth/kernels.hpp"

namespace dropsynth::kernels::serial {

namespace {

bool inside(std::ptrdiff_t v, std::size_t limit) { return v >= 0 && v < static_cast<std::ptrdiff_t>(limit); }

}  // namespace

void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const Scalar* a, std::size_t lda,
          const Scalar* b, std::size_t ldb, Scalar* c, std::size_t ldc, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      Scalar total = accumulate ? c[i * ldc + j] : Scalar{0};
      for (std::size_t p = 0; p < k; ++p) {
        const Scalar av = trans_a ? a[p * lda + i] : a[i * lda + p];
        const Scalar bv = trans_b ? b[j * ldb + p] : b[p * ldb + j];
        total += av * bv;
      }
      c[i * ldc + j] = total;
    }
  }
}

Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a, bool trans_b) {
  const std::size_t m = trans_a ? a.dim(1) : a.dim(0);
  const std::size_t k = trans_a ? a.dim(0) : a.dim(1);
  const std::size_t n = trans_b ? b.dim(0) : b.dim(1);
  if (k != (trans_b ? b.dim(1) : b.dim(0))) throw InvalidArgument("matmul inner dimension mismatch");
  Tensor c({m, n});
  gemm(trans_a, trans_b, m, n, k, a.data(), a.dim(1), b.data(), b.dim(1), c.data(), n, false);
  return c;
}

Tensor conv2d(const Tensor& x, const Tensor& w, ConvGeometry g) {
  const Shape ys = conv2d_output_shape(x.shape(), w.shape(), g);
  Tensor y(ys);
  for (std::size_t n = 0; n < ys[0]; ++n)
    for (std::size_t o = 0; o < ys[1]; ++o)
      for (std::size_t oy = 0; oy < ys[2]; ++oy)
        for (std::size_t ox = 0; ox < ys[3]; ++ox) {
          Scalar total = 0;
          for (std::size_t c = 0; c < x.dim(1); ++c)
            for (std::size_t ky = 0; ky < w.dim(2); ++ky)
              for (std::size_t kx = 0; kx < w.dim(3); ++kx) {
                const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad_h);
                const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad_w);
                if (inside(iy, x.dim(2)) && inside(ix, x.dim(3))) {
                  total += x.at(n, c, iy, ix) * w.at(o, c, ky, kx);
                }
              }
          y.at(n, o, oy, ox) = total;
        }
  return y;
}

Tensor conv2d_input_grad(const Tensor& grad_out, const Tensor& w, const Shape& x_shape, ConvGeometry g) {
  const Shape ys = conv2d_output_shape(x_shape, w.shape(), g);
  if (grad_out.shape() != ys) throw InvalidArgument("conv2d_input_grad: gradient shape mismatch");
  Tensor gx(x_shape);
  for (std::size_t n = 0; n < ys[0]; ++n)
    for (std::size_t o = 0; o < ys[1]; ++o)
      for (std::size_t oy = 0; oy < ys[2]; ++oy)
        for (std::size_t ox = 0; ox < ys[3]; ++ox) {
          const Scalar gv = grad_out.at(n, o, oy, ox);
          for (std::size_t c = 0; c < x_shape[1]; ++c)
            for (std::size_t ky = 0; ky < w.dim(2); ++ky)
              for (std::size_t kx = 0; kx < w.dim(3); ++kx) {
                const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad_h);
                const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad_w);
                if (inside(iy, x_shape[2]) && inside(ix, x_shape[3])) {
                  gx.at(n, c, iy, ix) += gv * w.at(o, c, ky, kx);
                }
              }
        }
  return gx;
}

Tensor conv2d_weight_grad(const Tensor& x, const Tensor& grad_out, const Shape& w_shape, ConvGeometry g) {
  const Shape ys = conv2d_output_shape(x.shape(), w_shape, g);
  if (grad_out.shape() != ys) throw InvalidArgument("conv2d_weight_grad: gradient shape mismatch");
  Tensor gw(w_shape);
  for (std::size_t n = 0; n < ys[0]; ++n)
    for (std::size_t o = 0; o < ys[1]; ++o)
      for (std::size_t oy = 0; oy < ys[2]; ++oy)
        for (std::size_t ox = 0; ox < ys[3]; ++ox) {
          const Scalar gv = grad_out.at(n, o, oy, ox);
          for (std::size_t c = 0; c < w_shape[1]; ++c)
            for (std::size_t ky = 0; ky < w_shape[2]; ++ky)
              for (std::size_t kx = 0; kx < w_shape[3]; ++kx) {
                const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad_h);
                const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad_w);
                if (inside(iy, x.dim(2)) && inside(ix, x.dim(3))) {
                  gw.at(o, c, ky, kx) += gv * x.at(n, c, iy, ix);
                }
              }
        }
  return gw;
}

Tensor upsample_nearest2x(const Tensor& x) {
  Tensor y({x.dim(0), x.dim(1), 2 * x.dim(2), 2 * x.dim(3)});
  for (std::size_t n = 0; n < y.dim(0); ++n)
    for (std::size_t c = 0; c < y.dim(1); ++c)
      for (std::size_t r = 0; r < y.dim(2); ++r)
        for (std::size_t q = 0; q < y.dim(3); ++q) y.at(n, c, r, q) = x.at(n, c, r / 2, q / 2);
  return y;
}

Tensor sum_pool2x(const Tensor& x) {
  Tensor y({x.dim(0), x.dim(1), x.dim(2) / 2, x.dim(3) / 2});
  for (std::size_t n = 0; n < x.dim(0); ++n)
    for (std::size_t c = 0; c < x.dim(1); ++c)
      for (std::size_t r = 0; r < x.dim(2); ++r)
        for (std::size_t q = 0; q < x.dim(3); ++q) y.at(n, c, r / 2, q / 2) += x.at(n, c, r, q);
  return y;
}

Tensor max_pool2d(const Tensor& x, std::size_t kernel, std::size_t stride, std::size_t pad) {
  const std::size_t oh = (x.dim(2) + 2 * pad - kernel) / stride + 1;
  const std::size_t ow = (x.dim(3) + 2 * pad - kernel) / stride + 1;
  Tensor y({x.dim(0), x.dim(1), oh, ow}, -std::numeric_limits<Scalar>::infinity());
  for (std::size_t n = 0; n < x.dim(0); ++n)
    for (std::size_t c = 0; c < x.dim(1); ++c)
      for (std::size_t oy = 0; oy < oh; ++oy)
        for (std::size_t ox = 0; ox < ow; ++ox)
          for (std::size_t ky = 0; ky < kernel; ++ky)
            for (std::size_t kx = 0; kx < kernel; ++kx) {
              const auto iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
              const auto ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
              if (inside(iy, x.dim(2)) && inside(ix, x.dim(3))) {
                y.at(n, c, oy, ox) = std::max(y.at(n, c, oy, ox), x.at(n, c, iy, ix));
              }
            }
  return y;
}

Tensor avg_pool2d(const Tensor& x, std::size_t kernel, std::size_t stride, std::size_t pad, bool count_include_pad) {
  const std::size_t oh = (x.dim(2) + 2 * pad - kernel) / stride + 1;
  const std::size_t ow = (x.dim(3) + 2 * pad - kernel) / stride + 1;
  Tensor y({x.dim(0), x.dim(1), oh, ow});
  for (std::size_t n = 0; n < x.dim(0); ++n)
    for (std::size_t c = 0; c < x.dim(1); ++c)
      for (std::size_t oy = 0; oy < oh; ++oy)
        for (std::size_t ox = 0; ox < ow; ++ox) {
          Scalar total = 0;
          std::size_t count = 0;
          for (std::size_t ky = 0; ky < kernel; ++ky)
            for (std::size_t kx = 0; kx < kernel; ++kx) {
              const auto iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
              const auto ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
              if (inside(iy, x.dim(2)) && inside(ix, x.dim(3))) {
                total += x.at(n, c, iy, ix);
                ++count;
              }
            }
          y.at(n, c, oy, ox) = total / static_cast<Scalar>(count_include_pad ? kernel * kernel : count);
        }
  return y;
}

Tensor area_resize(const Tensor& x, std::size_t out_h, std::size_t out_w) {
  // Integrate the piecewise-constant source over each output cell directly.
  const double sy = static_cast<double>(x.dim(2)) / static_cast<double>(out_h);
  const double sx = static_cast<double>(x.dim(3)) / static_cast<double>(out_w);
  Tensor y({x.dim(0), x.dim(1), out_h, out_w});
  for (std::size_t n = 0; n < x.dim(0); ++n)
    for (std::size_t c = 0; c < x.dim(1); ++c)
      for (std::size_t oy = 0; oy < out_h; ++oy)
        for (std::size_t ox = 0; ox < out_w; ++ox) {
          const double y0 = oy * sy, y1 = (oy + 1) * sy, x0 = ox * sx, x1 = (ox + 1) * sx;
          Scalar total = 0;
          for (std::size_t iy = 0; iy < x.dim(2); ++iy) {
            const double oy_len = std::min<double>(y1, iy + 1) - std::max<double>(y0, iy);
            if (oy_len <= 0) continue;
            for (std::size_t ix = 0; ix < x.dim(3); ++ix) {
              const double ox_len = std::min<double>(x1, ix + 1) - std::max<double>(x0, ix);
              if (ox_len <= 0) continue;
              total += oy_len * ox_len * x.at(n, c, iy, ix);
            }
          }
          y.at(n, c, oy, ox) = total / (sy * sx);
        }
  return y;
}

Tensor leaky_relu(const Tensor& x, Scalar slope) {
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > 0 ? x[i] : slope * x[i];
  return y;
}

Tensor pixel_norm(const Tensor& x, Scalar eps) {
  Tensor y(x.shape());
  for (std::size_t n = 0; n < x.dim(0); ++n)
    for (std::size_t r = 0; r < x.dim(2); ++r)
      for (std::size_t q = 0; q < x.dim(3); ++q) {
        Scalar mean_sq = 0;
        for (std::size_t c = 0; c < x.dim(1); ++c) mean_sq += x.at(n, c, r, q) * x.at(n, c, r, q);
        mean_sq /= static_cast<Scalar>(x.dim(1));
        for (std::size_t c = 0; c < x.dim(1); ++c) y.at(n, c, r, q) = x.at(n, c, r, q) / std::sqrt(mean_sq + eps);
      }
  return y;
}

}  // namespace dropsynth::kernels::serial
