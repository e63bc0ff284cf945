#include "dropsynth/kernels.hpp"

#include <omp.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include <fmt/format.h>

#include "dropsynth/error.hpp"

namespace dropsynth::kernels {

namespace {

// Packed-panel GEMM. A is packed into MR-row panels, B into NR-column panels,
// and a register-tiled micro-kernel accumulates MR x NR blocks of C.
constexpr std::size_t kMr = 4;
constexpr std::size_t kNr = 8;
constexpr std::size_t kMc = 64;
constexpr std::size_t kKc = 256;
constexpr std::size_t kNc = 1024;

// Elements of the im2col buffer per chunk (~16 MB of doubles).
constexpr std::size_t kColBudget = std::size_t{1} << 21;

inline Scalar load_a(bool trans, const Scalar* a, std::size_t lda, std::size_t i, std::size_t k) {
  return trans ? a[k * lda + i] : a[i * lda + k];
}

inline Scalar load_b(bool trans, const Scalar* b, std::size_t ldb, std::size_t k, std::size_t j) {
  return trans ? b[j * ldb + k] : b[k * ldb + j];
}

void pack_a(bool trans, const Scalar* a, std::size_t lda, std::size_t i0, std::size_t mc, std::size_t k0,
            std::size_t kc, Scalar* out) {
  for (std::size_t ir = 0; ir < mc; ir += kMr) {
    const std::size_t rows = std::min(kMr, mc - ir);
    for (std::size_t k = 0; k < kc; ++k) {
      for (std::size_t i = 0; i < kMr; ++i) {
        *out++ = i < rows ? load_a(trans, a, lda, i0 + ir + i, k0 + k) : Scalar{0};
      }
    }
  }
}

void pack_b(bool trans, const Scalar* b, std::size_t ldb, std::size_t k0, std::size_t kc, std::size_t j0,
            std::size_t nc, Scalar* out) {
  const std::size_t panels = (nc + kNr - 1) / kNr;
#pragma omp parallel for schedule(static)
  for (std::size_t p = 0; p < panels; ++p) {
    const std::size_t jr = p * kNr;
    const std::size_t cols = std::min(kNr, nc - jr);
    Scalar* dst = out + p * kc * kNr;
    for (std::size_t k = 0; k < kc; ++k) {
      if (!trans && cols == kNr) {
        const Scalar* src = b + (k0 + k) * ldb + j0 + jr;
        for (std::size_t j = 0; j < kNr; ++j) dst[j] = src[j];
      } else {
        for (std::size_t j = 0; j < kNr; ++j) {
          dst[j] = j < cols ? load_b(trans, b, ldb, k0 + k, j0 + jr + j) : Scalar{0};
        }
      }
      dst += kNr;
    }
  }
}

inline void micro_kernel(std::size_t kc, const Scalar* __restrict a, const Scalar* __restrict b, Scalar* c,
                         std::size_t ldc, std::size_t rows, std::size_t cols) {
  Scalar acc[kMr][kNr] = {};
  for (std::size_t k = 0; k < kc; ++k) {
    const Scalar* bk = b + k * kNr;
    const Scalar* ak = a + k * kMr;
    for (std::size_t i = 0; i < kMr; ++i) {
      const Scalar av = ak[i];
      for (std::size_t j = 0; j < kNr; ++j) acc[i][j] += av * bk[j];
    }
  }
  if (rows == kMr && cols == kNr) {
    for (std::size_t i = 0; i < kMr; ++i) {
      for (std::size_t j = 0; j < kNr; ++j) c[i * ldc + j] += acc[i][j];
    }
  } else {
    for (std::size_t i = 0; i < rows; ++i) {
      for (std::size_t j = 0; j < cols; ++j) c[i * ldc + j] += acc[i][j];
    }
  }
}

void check_rank(const Tensor& t, std::size_t rank, const char* what) {
  if (t.rank() != rank) {
    throw InvalidArgument(fmt::format("{} expects rank {}, got {}", what, rank, shape_string(t.shape())));
  }
}

// Copies output rows [r0, r1) worth of receptive fields into col (K x P).
void im2col_rows(const Scalar* x, std::size_t channels, std::size_t h, std::size_t w, std::size_t kh,
                 std::size_t kw, ConvGeometry g, std::size_t out_w, std::size_t r0, std::size_t r1, Scalar* col) {
  const std::size_t p = (r1 - r0) * out_w;
  for (std::size_t c = 0; c < channels; ++c) {
    const Scalar* plane = x + c * h * w;
    for (std::size_t ky = 0; ky < kh; ++ky) {
      for (std::size_t kx = 0; kx < kw; ++kx) {
        Scalar* dst = col + ((c * kh + ky) * kw + kx) * p;
        for (std::size_t r = r0; r < r1; ++r) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(r * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad_h);
          Scalar* row = dst + (r - r0) * out_w;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) {
            std::fill(row, row + out_w, Scalar{0});
            continue;
          }
          const Scalar* src = plane + static_cast<std::size_t>(iy) * w;
          for (std::size_t ox = 0; ox < out_w; ++ox) {
            const std::ptrdiff_t ix =
                static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad_w);
            row[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) ? Scalar{0} : src[ix];
          }
        }
      }
    }
  }
}

void col2im_rows(const Scalar* col, std::size_t channels, std::size_t h, std::size_t w, std::size_t kh,
                 std::size_t kw, ConvGeometry g, std::size_t out_w, std::size_t r0, std::size_t r1, Scalar* x) {
  const std::size_t p = (r1 - r0) * out_w;
  for (std::size_t c = 0; c < channels; ++c) {
    Scalar* plane = x + c * h * w;
    for (std::size_t ky = 0; ky < kh; ++ky) {
      for (std::size_t kx = 0; kx < kw; ++kx) {
        const Scalar* src = col + ((c * kh + ky) * kw + kx) * p;
        for (std::size_t r = r0; r < r1; ++r) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(r * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad_h);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
          Scalar* dst = plane + static_cast<std::size_t>(iy) * w;
          const Scalar* row = src + (r - r0) * out_w;
          for (std::size_t ox = 0; ox < out_w; ++ox) {
            const std::ptrdiff_t ix =
                static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad_w);
            if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(w)) dst[ix] += row[ox];
          }
        }
      }
    }
  }
}

bool is_pointwise(const Shape& w, ConvGeometry g) {
  return w[2] == 1 && w[3] == 1 && g.stride == 1 && g.pad_h == 0 && g.pad_w == 0;
}

std::size_t rows_per_chunk(std::size_t k, std::size_t out_h, std::size_t out_w) {
  const std::size_t per_row = std::max<std::size_t>(1, k * out_w);
  return std::clamp<std::size_t>(kColBudget / per_row, 1, out_h);
}

// Run per-image work in parallel only when the batch can occupy the team;
// otherwise the GEMM inside parallelizes.
bool batch_parallel(std::size_t n) { return n > 1 && n >= static_cast<std::size_t>(omp_get_max_threads()); }

struct Padded4 {
  std::size_t dims[4];
};

Padded4 pad4(const Shape& s) {
  if (s.size() > 4) throw InvalidArgument(fmt::format("broadcast supports rank <= 4, got {}", shape_string(s)));
  Padded4 p{{1, 1, 1, 1}};
  const std::size_t off = 4 - s.size();
  for (std::size_t i = 0; i < s.size(); ++i) p.dims[off + i] = s[i];
  return p;
}

// Strides of `small` viewed inside `big`, zero along broadcast axes.
Padded4 broadcast_strides(const Padded4& small, const Padded4& big, const Shape& small_shape, const Shape& big_shape) {
  Padded4 strides{};
  std::size_t stride = 1;
  for (int i = 3; i >= 0; --i) {
    if (small.dims[i] == big.dims[i]) {
      strides.dims[i] = small.dims[i] == 1 ? 0 : stride;
    } else if (small.dims[i] == 1) {
      strides.dims[i] = 0;
    } else {
      throw InvalidArgument(
          fmt::format("cannot broadcast {} to {}", shape_string(small_shape), shape_string(big_shape)));
    }
    stride *= small.dims[i];
  }
  return strides;
}

std::vector<std::pair<std::size_t, Scalar>> area_weights_for(std::size_t out_index, std::size_t in_size,
                                                             std::size_t out_size) {
  const double scale = static_cast<double>(in_size) / static_cast<double>(out_size);
  const double lo = out_index * scale;
  const double hi = (out_index + 1) * scale;
  std::vector<std::pair<std::size_t, Scalar>> weights;
  const auto first = static_cast<std::size_t>(std::floor(lo));
  const auto last = std::min(in_size, static_cast<std::size_t>(std::ceil(hi)));
  for (std::size_t i = first; i < last; ++i) {
    const double overlap = std::min<double>(hi, i + 1) - std::max<double>(lo, i);
    if (overlap > 0) weights.emplace_back(i, overlap / scale);
  }
  return weights;
}

}  // namespace

Shape conv2d_output_shape(const Shape& x, const Shape& w, ConvGeometry g) {
  if (x.size() != 4 || w.size() != 4) {
    throw InvalidArgument(fmt::format("conv2d expects NCHW input and OIHW weight, got {} and {}", shape_string(x),
                                      shape_string(w)));
  }
  if (x[1] != w[1]) {
    throw InvalidArgument(fmt::format("conv2d channel mismatch: input {} weight {}", shape_string(x), shape_string(w)));
  }
  if (g.stride == 0) throw InvalidArgument("conv2d stride must be positive");
  const std::size_t ph = x[2] + 2 * g.pad_h;
  const std::size_t pw = x[3] + 2 * g.pad_w;
  if (ph < w[2] || pw < w[3]) {
    throw InvalidArgument(
        fmt::format("conv2d kernel {} larger than padded input {}", shape_string(w), shape_string(x)));
  }
  return {x[0], w[0], (ph - w[2]) / g.stride + 1, (pw - w[3]) / g.stride + 1};
}

void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const Scalar* a, std::size_t lda,
          const Scalar* b, std::size_t ldb, Scalar* c, std::size_t ldc, bool accumulate) {
  if (!accumulate) {
    for (std::size_t i = 0; i < m; ++i) std::fill(c + i * ldc, c + i * ldc + n, Scalar{0});
  }
  if (m == 0 || n == 0 || k == 0) return;

  std::vector<Scalar> b_packed(kKc * ((std::min(kNc, n) + kNr - 1) / kNr) * kNr);
  for (std::size_t j0 = 0; j0 < n; j0 += kNc) {
    const std::size_t nc = std::min(kNc, n - j0);
    for (std::size_t k0 = 0; k0 < k; k0 += kKc) {
      const std::size_t kc = std::min(kKc, k - k0);
      pack_b(trans_b, b, ldb, k0, kc, j0, nc, b_packed.data());
      const std::size_t m_blocks = (m + kMc - 1) / kMc;
      const std::size_t n_panels = (nc + kNr - 1) / kNr;
#pragma omp parallel
      {
        std::vector<Scalar> a_packed(kMc * kKc);
#pragma omp for schedule(dynamic) collapse(1)
        for (std::size_t mb = 0; mb < m_blocks; ++mb) {
          const std::size_t i0 = mb * kMc;
          const std::size_t mc = std::min(kMc, m - i0);
          pack_a(trans_a, a, lda, i0, mc, k0, kc, a_packed.data());
          for (std::size_t p = 0; p < n_panels; ++p) {
            const std::size_t jr = p * kNr;
            const std::size_t cols = std::min(kNr, nc - jr);
            const Scalar* bp = b_packed.data() + p * kc * kNr;
            for (std::size_t ir = 0; ir < mc; ir += kMr) {
              const std::size_t rows = std::min(kMr, mc - ir);
              micro_kernel(kc, a_packed.data() + ir * kc, bp, c + (i0 + ir) * ldc + j0 + jr, ldc, rows, cols);
            }
          }
        }
      }
    }
  }
}

Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a, bool trans_b) {
  check_rank(a, 2, "matmul");
  check_rank(b, 2, "matmul");
  const std::size_t m = trans_a ? a.dim(1) : a.dim(0);
  const std::size_t k = trans_a ? a.dim(0) : a.dim(1);
  const std::size_t kb = trans_b ? b.dim(1) : b.dim(0);
  const std::size_t n = trans_b ? b.dim(0) : b.dim(1);
  if (k != kb) {
    throw InvalidArgument(fmt::format("matmul inner dimension mismatch: {} vs {}", shape_string(a.shape()),
                                      shape_string(b.shape())));
  }
  Tensor c({m, n});
  gemm(trans_a, trans_b, m, n, k, a.data(), a.dim(1), b.data(), b.dim(1), c.data(), n, false);
  return c;
}

Tensor conv2d(const Tensor& x, const Tensor& w, ConvGeometry g) {
  const Shape ys = conv2d_output_shape(x.shape(), w.shape(), g);
  const std::size_t n = ys[0], oc = ys[1], oh = ys[2], ow = ys[3];
  const std::size_t ic = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::size_t kh = w.dim(2), kw = w.dim(3);
  const std::size_t k = ic * kh * kw;
  Tensor y(ys);
  const bool pointwise = is_pointwise(w.shape(), g);
  const std::size_t chunk = rows_per_chunk(k, oh, ow);

#pragma omp parallel if (batch_parallel(n))
  {
    std::vector<Scalar> col(pointwise ? 0 : k * chunk * ow);
#pragma omp for schedule(static)
    for (std::size_t img = 0; img < n; ++img) {
      const Scalar* xi = x.data() + img * ic * h * wd;
      Scalar* yi = y.data() + img * oc * oh * ow;
      if (pointwise) {
        gemm(false, false, oc, oh * ow, k, w.data(), k, xi, h * wd, yi, oh * ow, false);
        continue;
      }
      for (std::size_t r0 = 0; r0 < oh; r0 += chunk) {
        const std::size_t r1 = std::min(oh, r0 + chunk);
        const std::size_t p = (r1 - r0) * ow;
        im2col_rows(xi, ic, h, wd, kh, kw, g, ow, r0, r1, col.data());
        gemm(false, false, oc, p, k, w.data(), k, col.data(), p, yi + r0 * ow, oh * ow, false);
      }
    }
  }
  return y;
}

Tensor conv2d_input_grad(const Tensor& grad_out, const Tensor& w, const Shape& x_shape, ConvGeometry g) {
  const Shape ys = conv2d_output_shape(x_shape, w.shape(), g);
  if (grad_out.shape() != ys) {
    throw InvalidArgument(fmt::format("conv2d_input_grad: gradient shape {} does not match output {}",
                                      shape_string(grad_out.shape()), shape_string(ys)));
  }
  const std::size_t n = ys[0], oc = ys[1], oh = ys[2], ow = ys[3];
  const std::size_t ic = x_shape[1], h = x_shape[2], wd = x_shape[3];
  const std::size_t kh = w.dim(2), kw = w.dim(3);
  const std::size_t k = ic * kh * kw;
  Tensor gx(x_shape);
  const bool pointwise = is_pointwise(w.shape(), g);
  const std::size_t chunk = rows_per_chunk(k, oh, ow);

#pragma omp parallel if (batch_parallel(n))
  {
    std::vector<Scalar> col(pointwise ? 0 : k * chunk * ow);
#pragma omp for schedule(static)
    for (std::size_t img = 0; img < n; ++img) {
      const Scalar* gyi = grad_out.data() + img * oc * oh * ow;
      Scalar* gxi = gx.data() + img * ic * h * wd;
      if (pointwise) {
        gemm(true, false, k, oh * ow, oc, w.data(), k, gyi, oh * ow, gxi, h * wd, false);
        continue;
      }
      for (std::size_t r0 = 0; r0 < oh; r0 += chunk) {
        const std::size_t r1 = std::min(oh, r0 + chunk);
        const std::size_t p = (r1 - r0) * ow;
        gemm(true, false, k, p, oc, w.data(), k, gyi + r0 * ow, oh * ow, col.data(), p, false);
        col2im_rows(col.data(), ic, h, wd, kh, kw, g, ow, r0, r1, gxi);
      }
    }
  }
  return gx;
}

Tensor conv2d_weight_grad(const Tensor& x, const Tensor& grad_out, const Shape& w_shape, ConvGeometry g) {
  const Shape ys = conv2d_output_shape(x.shape(), w_shape, g);
  if (grad_out.shape() != ys) {
    throw InvalidArgument(fmt::format("conv2d_weight_grad: gradient shape {} does not match output {}",
                                      shape_string(grad_out.shape()), shape_string(ys)));
  }
  const std::size_t n = ys[0], oc = ys[1], oh = ys[2], ow = ys[3];
  const std::size_t ic = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::size_t kh = w_shape[2], kw = w_shape[3];
  const std::size_t k = ic * kh * kw;
  Tensor gw(w_shape);
  const bool pointwise = is_pointwise(w_shape, g);
  const std::size_t chunk = rows_per_chunk(k, oh, ow);
  const bool by_batch = batch_parallel(n);

#pragma omp parallel if (by_batch)
  {
    std::vector<Scalar> col(pointwise ? 0 : k * chunk * ow);
    std::vector<Scalar> local(by_batch ? gw.size() : 0);
    Scalar* acc = by_batch ? local.data() : gw.data();
#pragma omp for schedule(static)
    for (std::size_t img = 0; img < n; ++img) {
      const Scalar* xi = x.data() + img * ic * h * wd;
      const Scalar* gyi = grad_out.data() + img * oc * oh * ow;
      if (pointwise) {
        gemm(false, true, oc, k, oh * ow, gyi, oh * ow, xi, h * wd, acc, k, true);
        continue;
      }
      for (std::size_t r0 = 0; r0 < oh; r0 += chunk) {
        const std::size_t r1 = std::min(oh, r0 + chunk);
        const std::size_t p = (r1 - r0) * ow;
        im2col_rows(xi, ic, h, wd, kh, kw, g, ow, r0, r1, col.data());
        gemm(false, true, oc, k, p, gyi + r0 * ow, oh * ow, col.data(), p, acc, k, true);
      }
    }
    if (by_batch) {
#pragma omp critical
      for (std::size_t i = 0; i < gw.size(); ++i) gw[i] += local[i];
    }
  }
  return gw;
}

Tensor upsample_nearest2x(const Tensor& x) {
  check_rank(x, 4, "upsample_nearest2x");
  const std::size_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  Tensor y({x.dim(0), x.dim(1), 2 * h, 2 * w});
#pragma omp parallel for schedule(static)
  for (std::size_t p = 0; p < planes; ++p) {
    const Scalar* src = x.data() + p * h * w;
    Scalar* dst = y.data() + p * 4 * h * w;
    for (std::size_t r = 0; r < 2 * h; ++r) {
      const Scalar* srow = src + (r / 2) * w;
      Scalar* drow = dst + r * 2 * w;
      for (std::size_t c = 0; c < 2 * w; ++c) drow[c] = srow[c / 2];
    }
  }
  return y;
}

Tensor sum_pool2x(const Tensor& x) {
  check_rank(x, 4, "sum_pool2x");
  if (x.dim(2) % 2 != 0 || x.dim(3) % 2 != 0) {
    throw InvalidArgument(fmt::format("sum_pool2x needs even spatial size, got {}", shape_string(x.shape())));
  }
  const std::size_t planes = x.dim(0) * x.dim(1), h = x.dim(2) / 2, w = x.dim(3) / 2;
  Tensor y({x.dim(0), x.dim(1), h, w});
#pragma omp parallel for schedule(static)
  for (std::size_t p = 0; p < planes; ++p) {
    const Scalar* src = x.data() + p * 4 * h * w;
    Scalar* dst = y.data() + p * h * w;
    for (std::size_t r = 0; r < h; ++r) {
      const Scalar* top = src + 2 * r * 2 * w;
      const Scalar* bottom = top + 2 * w;
      for (std::size_t c = 0; c < w; ++c) {
        dst[r * w + c] = (top[2 * c] + top[2 * c + 1]) + (bottom[2 * c] + bottom[2 * c + 1]);
      }
    }
  }
  return y;
}

Tensor max_pool2d(const Tensor& x, std::size_t kernel, std::size_t stride, std::size_t pad) {
  check_rank(x, 4, "max_pool2d");
  const std::size_t h = x.dim(2), w = x.dim(3);
  const std::size_t oh = (h + 2 * pad - kernel) / stride + 1;
  const std::size_t ow = (w + 2 * pad - kernel) / stride + 1;
  const std::size_t planes = x.dim(0) * x.dim(1);
  Tensor y({x.dim(0), x.dim(1), oh, ow});
#pragma omp parallel for schedule(static)
  for (std::size_t p = 0; p < planes; ++p) {
    const Scalar* src = x.data() + p * h * w;
    Scalar* dst = y.data() + p * oh * ow;
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        Scalar best = -std::numeric_limits<Scalar>::infinity();
        for (std::size_t ky = 0; ky < kernel; ++ky) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
          for (std::size_t kx = 0; kx < kernel; ++kx) {
            const std::ptrdiff_t ix =
                static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
            best = std::max(best, src[iy * w + ix]);
          }
        }
        dst[oy * ow + ox] = best;
      }
    }
  }
  return y;
}

Tensor avg_pool2d(const Tensor& x, std::size_t kernel, std::size_t stride, std::size_t pad, bool count_include_pad) {
  check_rank(x, 4, "avg_pool2d");
  const std::size_t h = x.dim(2), w = x.dim(3);
  const std::size_t oh = (h + 2 * pad - kernel) / stride + 1;
  const std::size_t ow = (w + 2 * pad - kernel) / stride + 1;
  const std::size_t planes = x.dim(0) * x.dim(1);
  Tensor y({x.dim(0), x.dim(1), oh, ow});
#pragma omp parallel for schedule(static)
  for (std::size_t p = 0; p < planes; ++p) {
    const Scalar* src = x.data() + p * h * w;
    Scalar* dst = y.data() + p * oh * ow;
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        Scalar total = 0;
        std::size_t count = 0;
        for (std::size_t ky = 0; ky < kernel; ++ky) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
          for (std::size_t kx = 0; kx < kernel; ++kx) {
            const std::ptrdiff_t ix =
                static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
            total += src[iy * w + ix];
            ++count;
          }
        }
        dst[oy * ow + ox] = total / static_cast<Scalar>(count_include_pad ? kernel * kernel : count);
      }
    }
  }
  return y;
}

Tensor area_resize(const Tensor& x, std::size_t out_h, std::size_t out_w) {
  check_rank(x, 4, "area_resize");
  if (out_h == 0 || out_w == 0) throw InvalidArgument("area_resize target must be non-empty");
  const std::size_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  std::vector<std::vector<std::pair<std::size_t, Scalar>>> wy(out_h), wx(out_w);
  for (std::size_t i = 0; i < out_h; ++i) wy[i] = area_weights_for(i, h, out_h);
  for (std::size_t i = 0; i < out_w; ++i) wx[i] = area_weights_for(i, w, out_w);
  Tensor y({x.dim(0), x.dim(1), out_h, out_w});
#pragma omp parallel
  {
    std::vector<Scalar> rows(out_h * w);
#pragma omp for schedule(static)
    for (std::size_t p = 0; p < planes; ++p) {
      const Scalar* src = x.data() + p * h * w;
      Scalar* dst = y.data() + p * out_h * out_w;
      std::fill(rows.begin(), rows.end(), Scalar{0});
      for (std::size_t oy = 0; oy < out_h; ++oy) {
        Scalar* acc = rows.data() + oy * w;
        for (const auto& [iy, weight] : wy[oy]) {
          const Scalar* srow = src + iy * w;
          for (std::size_t c = 0; c < w; ++c) acc[c] += weight * srow[c];
        }
      }
      for (std::size_t oy = 0; oy < out_h; ++oy) {
        const Scalar* acc = rows.data() + oy * w;
        for (std::size_t ox = 0; ox < out_w; ++ox) {
          Scalar v = 0;
          for (const auto& [ix, weight] : wx[ox]) v += weight * acc[ix];
          dst[oy * out_w + ox] = v;
        }
      }
    }
  }
  return y;
}

Tensor bilinear_resize(const Tensor& x, std::size_t out_h, std::size_t out_w) {
  check_rank(x, 4, "bilinear_resize");
  if (out_h == 0 || out_w == 0) throw InvalidArgument("bilinear_resize target must be non-empty");
  const std::size_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  struct Tap {
    std::size_t i0, i1;
    Scalar t;
  };
  // Half-pixel centers, clamped at the border (align_corners = false).
  auto taps = [](std::size_t out, std::size_t in) {
    std::vector<Tap> result(out);
    const double scale = static_cast<double>(in) / static_cast<double>(out);
    for (std::size_t o = 0; o < out; ++o) {
      double src = std::max(0.0, (o + 0.5) * scale - 0.5);
      auto i0 = std::min(static_cast<std::size_t>(src), in - 1);
      std::size_t i1 = std::min(i0 + 1, in - 1);
      result[o] = {i0, i1, static_cast<Scalar>(src - static_cast<double>(i0))};
    }
    return result;
  };
  const auto ty = taps(out_h, h);
  const auto tx = taps(out_w, w);
  Tensor y({x.dim(0), x.dim(1), out_h, out_w});
#pragma omp parallel for schedule(static)
  for (std::size_t p = 0; p < planes; ++p) {
    const Scalar* src = x.data() + p * h * w;
    Scalar* dst = y.data() + p * out_h * out_w;
    for (std::size_t oy = 0; oy < out_h; ++oy) {
      const Tap& a = ty[oy];
      for (std::size_t ox = 0; ox < out_w; ++ox) {
        const Tap& b = tx[ox];
        const Scalar top = src[a.i0 * w + b.i0] * (1 - b.t) + src[a.i0 * w + b.i1] * b.t;
        const Scalar bottom = src[a.i1 * w + b.i0] * (1 - b.t) + src[a.i1 * w + b.i1] * b.t;
        dst[oy * out_w + ox] = top * (1 - a.t) + bottom * a.t;
      }
    }
  }
  return y;
}

Tensor leaky_relu(const Tensor& x, Scalar slope) {
  Tensor y(x.shape());
  const std::size_t n = x.size();
  const Scalar* src = x.data();
  Scalar* dst = y.data();
#pragma omp parallel for schedule(static)
  for (std::size_t i = 0; i < n; ++i) dst[i] = src[i] > 0 ? src[i] : slope * src[i];
  return y;
}

Tensor leaky_relu_slope(const Tensor& x, Scalar slope) {
  Tensor y(x.shape());
  const std::size_t n = x.size();
  const Scalar* src = x.data();
  Scalar* dst = y.data();
#pragma omp parallel for schedule(static)
  for (std::size_t i = 0; i < n; ++i) dst[i] = src[i] > 0 ? Scalar{1} : slope;
  return y;
}

Tensor pixel_norm(const Tensor& x, Scalar eps) {
  check_rank(x, 4, "pixel_norm");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor y(x.shape());
#pragma omp parallel
  {
    std::vector<Scalar> scale(hw);
#pragma omp for schedule(static)
    for (std::size_t img = 0; img < n; ++img) {
      const Scalar* src = x.data() + img * c * hw;
      Scalar* dst = y.data() + img * c * hw;
      std::fill(scale.begin(), scale.end(), Scalar{0});
      for (std::size_t ch = 0; ch < c; ++ch) {
        const Scalar* plane = src + ch * hw;
        for (std::size_t i = 0; i < hw; ++i) scale[i] += plane[i] * plane[i];
      }
      for (std::size_t i = 0; i < hw; ++i) scale[i] = 1 / std::sqrt(scale[i] / static_cast<Scalar>(c) + eps);
      for (std::size_t ch = 0; ch < c; ++ch) {
        const Scalar* plane = src + ch * hw;
        Scalar* out = dst + ch * hw;
        for (std::size_t i = 0; i < hw; ++i) out[i] = plane[i] * scale[i];
      }
    }
  }
  return y;
}

Tensor broadcast_to(const Tensor& x, const Shape& shape) {
  if (x.shape() == shape) return x;
  if (x.rank() > shape.size()) {
    throw InvalidArgument(fmt::format("cannot broadcast {} to {}", shape_string(x.shape()), shape_string(shape)));
  }
  const Padded4 in = pad4(x.shape());
  const Padded4 out = pad4(shape);
  const Padded4 st = broadcast_strides(in, out, x.shape(), shape);
  Tensor y(shape);
  const std::size_t d0 = out.dims[0], d1 = out.dims[1], d2 = out.dims[2], d3 = out.dims[3];
  const Scalar* src = x.data();
  Scalar* dst = y.data();
#pragma omp parallel for collapse(2) schedule(static)
  for (std::size_t a = 0; a < d0; ++a) {
    for (std::size_t b = 0; b < d1; ++b) {
      for (std::size_t c = 0; c < d2; ++c) {
        const Scalar* s = src + a * st.dims[0] + b * st.dims[1] + c * st.dims[2];
        Scalar* o = dst + ((a * d1 + b) * d2 + c) * d3;
        if (st.dims[3] == 0) {
          std::fill(o, o + d3, *s);
        } else {
          for (std::size_t e = 0; e < d3; ++e) o[e] = s[e];
        }
      }
    }
  }
  return y;
}

Tensor sum_to(const Tensor& x, const Shape& shape) {
  if (x.shape() == shape) return x;
  if (shape.size() > x.rank()) {
    throw InvalidArgument(fmt::format("cannot reduce {} to {}", shape_string(x.shape()), shape_string(shape)));
  }
  const Padded4 in = pad4(x.shape());
  const Padded4 out = pad4(shape);
  const Padded4 st = broadcast_strides(out, in, shape, x.shape());
  Tensor y(shape);
  const std::size_t d0 = in.dims[0], d1 = in.dims[1], d2 = in.dims[2], d3 = in.dims[3];
  const Scalar* src = x.data();
  Scalar* dst = y.data();
  for (std::size_t a = 0; a < d0; ++a) {
    for (std::size_t b = 0; b < d1; ++b) {
      for (std::size_t c = 0; c < d2; ++c) {
        Scalar* o = dst + a * st.dims[0] + b * st.dims[1] + c * st.dims[2];
        const Scalar* s = src + ((a * d1 + b) * d2 + c) * d3;
        if (st.dims[3] == 0) {
          Scalar total = 0;
          for (std::size_t e = 0; e < d3; ++e) total += s[e];
          *o += total;
        } else {
          for (std::size_t e = 0; e < d3; ++e) o[e] += s[e];
        }
      }
    }
  }
  return y;
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  check_rank(a, 4, "concat_channels");
  check_rank(b, 4, "concat_channels");
  if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3)) {
    throw InvalidArgument(
        fmt::format("concat_channels shape mismatch {} vs {}", shape_string(a.shape()), shape_string(b.shape())));
  }
  const std::size_t n = a.dim(0), hw = a.dim(2) * a.dim(3), ca = a.dim(1), cb = b.dim(1);
  Tensor y({n, ca + cb, a.dim(2), a.dim(3)});
  for (std::size_t img = 0; img < n; ++img) {
    std::copy_n(a.data() + img * ca * hw, ca * hw, y.data() + img * (ca + cb) * hw);
    std::copy_n(b.data() + img * cb * hw, cb * hw, y.data() + (img * (ca + cb) + ca) * hw);
  }
  return y;
}

Tensor slice_channels(const Tensor& x, std::size_t begin, std::size_t end) {
  check_rank(x, 4, "slice_channels");
  if (begin > end || end > x.dim(1)) {
    throw InvalidArgument(fmt::format("slice_channels [{}, {}) out of range for {}", begin, end, shape_string(x.shape())));
  }
  const std::size_t n = x.dim(0), hw = x.dim(2) * x.dim(3), c = x.dim(1), len = end - begin;
  Tensor y({n, len, x.dim(2), x.dim(3)});
  for (std::size_t img = 0; img < n; ++img) {
    std::copy_n(x.data() + (img * c + begin) * hw, len * hw, y.data() + img * len * hw);
  }
  return y;
}

Tensor pad_channels(const Tensor& x, std::size_t before, std::size_t after) {
  check_rank(x, 4, "pad_channels");
  const std::size_t n = x.dim(0), hw = x.dim(2) * x.dim(3), c = x.dim(1), total = before + c + after;
  Tensor y({n, total, x.dim(2), x.dim(3)});
  for (std::size_t img = 0; img < n; ++img) {
    std::copy_n(x.data() + img * c * hw, c * hw, y.data() + (img * total + before) * hw);
  }
  return y;
}

}  // namespace dropsynth::kernels
