#include <doctest.h>

#include <random>

#include "dropsynth/error.hpp"
#include "dropsynth/kernels.hpp"
#include "test_util.hpp"

using namespace dropsynth;
using dropsynth::testing::random_tensor;
namespace k = dropsynth::kernels;

TEST_CASE("gemm matches the reference for every transpose combination") {
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<std::size_t> dim(1, 70);
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t m = dim(rng), n = dim(rng), kk = dim(rng);
    const bool ta = trial & 1, tb = trial & 2;
    const Tensor a = random_tensor(ta ? Shape{kk, m} : Shape{m, kk}, rng);
    const Tensor b = random_tensor(tb ? Shape{n, kk} : Shape{kk, n}, rng);
    const Tensor fast = k::matmul(a, b, ta, tb);
    const Tensor slow = k::serial::matmul(a, b, ta, tb);
    CHECK(max_abs_diff(fast, slow) < 1e-11);
  }
}

TEST_CASE("gemm crossing block boundaries and accumulating") {
  std::mt19937_64 rng(5);
  const std::size_t m = 130, n = 1100, kk = 300;
  const Tensor a = random_tensor({m, kk}, rng);
  const Tensor b = random_tensor({kk, n}, rng);
  Tensor c1 = random_tensor({m, n}, rng);
  Tensor c2 = c1;
  k::gemm(false, false, m, n, kk, a.data(), kk, b.data(), n, c1.data(), n, true);
  k::serial::gemm(false, false, m, n, kk, a.data(), kk, b.data(), n, c2.data(), n, true);
  CHECK(max_abs_diff(c1, c2) < 1e-10);
}

TEST_CASE("conv2d family matches the direct loops") {
  std::mt19937_64 rng(3);
  struct Case {
    Shape x, w;
    k::ConvGeometry g;
  };
  const Case cases[] = {
      {{2, 3, 8, 8}, {4, 3, 3, 3}, k::ConvGeometry::same(3)},
      {{3, 5, 4, 4}, {6, 5, 4, 4}, {1, 0, 0}},
      {{2, 4, 6, 6}, {3, 4, 1, 1}, {1, 0, 0}},
      {{1, 2, 9, 7}, {3, 2, 3, 3}, {2, 0, 0}},
      {{2, 3, 7, 9}, {2, 3, 1, 7}, {1, 0, 3}},
      {{1, 3, 11, 11}, {4, 3, 3, 3}, {2, 1, 1}},
  };
  for (const auto& c : cases) {
    CAPTURE(shape_string(c.x));
    const Tensor x = random_tensor(c.x, rng);
    const Tensor w = random_tensor(c.w, rng);
    const Tensor y = k::conv2d(x, w, c.g);
    CHECK(max_abs_diff(y, k::serial::conv2d(x, w, c.g)) < 1e-11);
    const Tensor gy = random_tensor(y.shape(), rng);
    CHECK(max_abs_diff(k::conv2d_input_grad(gy, w, c.x, c.g), k::serial::conv2d_input_grad(gy, w, c.x, c.g)) <
          1e-11);
    CHECK(max_abs_diff(k::conv2d_weight_grad(x, gy, c.w, c.g), k::serial::conv2d_weight_grad(x, gy, c.w, c.g)) <
          1e-11);
  }
}

TEST_CASE("conv2d input and weight gradients are adjoint to the forward map") {
  // <conv(x, w), gy> == <x, dx(gy)> == <w, dw(x, gy)>
  std::mt19937_64 rng(9);
  const Tensor x = random_tensor({2, 3, 6, 6}, rng);
  const Tensor w = random_tensor({4, 3, 3, 3}, rng);
  const auto g = k::ConvGeometry::same(3);
  const Tensor y = k::conv2d(x, w, g);
  const Tensor gy = random_tensor(y.shape(), rng);
  auto dot = [](const Tensor& a, const Tensor& b) {
    Scalar s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
  };
  const Scalar lhs = dot(y, gy);
  CHECK(lhs == doctest::Approx(dot(x, k::conv2d_input_grad(gy, w, x.shape(), g))).epsilon(1e-12));
  CHECK(lhs == doctest::Approx(dot(w, k::conv2d_weight_grad(x, gy, w.shape(), g))).epsilon(1e-12));
}

TEST_CASE("conv2d rejects mismatched channels") {
  CHECK_THROWS_AS(k::conv2d(Tensor({1, 2, 4, 4}), Tensor({1, 3, 3, 3}), {}), InvalidArgument);
}

TEST_CASE("pooling, resampling and activations match the reference") {
  std::mt19937_64 rng(21);
  const Tensor x = random_tensor({2, 3, 12, 12}, rng);
  CHECK(max_abs_diff(k::upsample_nearest2x(x), k::serial::upsample_nearest2x(x)) == 0);
  CHECK(max_abs_diff(k::sum_pool2x(x), k::serial::sum_pool2x(x)) < 1e-14);
  CHECK(max_abs_diff(k::max_pool2d(x, 3, 2, 0), k::serial::max_pool2d(x, 3, 2, 0)) == 0);
  CHECK(max_abs_diff(k::max_pool2d(x, 3, 1, 1), k::serial::max_pool2d(x, 3, 1, 1)) == 0);
  CHECK(max_abs_diff(k::avg_pool2d(x, 3, 1, 1, false), k::serial::avg_pool2d(x, 3, 1, 1, false)) < 1e-14);
  CHECK(max_abs_diff(k::avg_pool2d(x, 3, 1, 1, true), k::serial::avg_pool2d(x, 3, 1, 1, true)) < 1e-14);
  for (auto [h, w] : {std::pair<std::size_t, std::size_t>{4, 4}, {5, 7}, {12, 12}, {20, 30}}) {
    CHECK(max_abs_diff(k::area_resize(x, h, w), k::serial::area_resize(x, h, w)) < 1e-12);
  }
  CHECK(max_abs_diff(k::leaky_relu(x, 0.2), k::serial::leaky_relu(x, 0.2)) == 0);
  CHECK(max_abs_diff(k::pixel_norm(x, 1e-8), k::serial::pixel_norm(x, 1e-8)) < 1e-13);
}

TEST_CASE("area_resize preserves the mean") {
  std::mt19937_64 rng(2);
  const Tensor x = random_tensor({1, 1, 30, 30}, rng);
  for (std::size_t target : {1, 4, 7, 15, 16}) {
    const Tensor y = k::area_resize(x, target, target);
    CHECK(y.sum() / static_cast<double>(y.size()) == doctest::Approx(x.sum() / x.size()).epsilon(1e-12));
  }
}

TEST_CASE("bilinear_resize keeps constants and endpoints") {
  Tensor x({1, 1, 2, 2}, 0.25);
  const Tensor y = k::bilinear_resize(x, 5, 5);
  CHECK(y.min() == doctest::Approx(0.25));
  CHECK(y.max() == doctest::Approx(0.25));
  Tensor ramp({1, 1, 1, 2}, std::vector<Scalar>{0, 1});
  const Tensor up = k::bilinear_resize(ramp, 1, 4);
  // Half-pixel centers: sources at -0.25, 0.25, 0.75, 1.25 clamp to [0, 1].
  CHECK(up[0] == doctest::Approx(0.0));
  CHECK(up[1] == doctest::Approx(0.25));
  CHECK(up[2] == doctest::Approx(0.75));
  CHECK(up[3] == doctest::Approx(1.0));
}

TEST_CASE("broadcast_to and sum_to are adjoint") {
  std::mt19937_64 rng(4);
  const std::pair<Shape, Shape> cases[] = {
      {{1, 3, 1, 1}, {2, 3, 4, 5}}, {{2, 1, 4, 5}, {2, 3, 4, 5}}, {{2, 1, 1, 1}, {2, 3, 4, 5}},
      {{1}, {3, 2}},                {{3, 1}, {3, 4}},             {{4}, {3, 4}},
  };
  for (const auto& [small, big] : cases) {
    const Tensor a = random_tensor(small, rng);
    const Tensor b = random_tensor(big, rng);
    const Tensor ab = k::broadcast_to(a, big);
    const Tensor ba = k::sum_to(b, small);
    Scalar lhs = 0, rhs = 0;
    for (std::size_t i = 0; i < b.size(); ++i) lhs += ab[i] * b[i];
    for (std::size_t i = 0; i < a.size(); ++i) rhs += a[i] * ba[i];
    CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
  }
  CHECK_THROWS_AS(k::broadcast_to(Tensor({2, 3}), {3, 3}), InvalidArgument);
}

TEST_CASE("channel concat, slice and pad compose") {
  std::mt19937_64 rng(8);
  const Tensor a = random_tensor({2, 3, 2, 2}, rng);
  const Tensor b = random_tensor({2, 1, 2, 2}, rng);
  const Tensor ab = k::concat_channels(a, b);
  CHECK(ab.shape() == Shape{2, 4, 2, 2});
  CHECK(k::slice_channels(ab, 0, 3) == a);
  CHECK(k::slice_channels(ab, 3, 4) == b);
  const Tensor padded = k::pad_channels(b, 3, 0);
  CHECK(k::slice_channels(padded, 3, 4) == b);
  CHECK(k::slice_channels(padded, 0, 3).max() == 0);
}
