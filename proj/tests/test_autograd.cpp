#include <doctest.h>

#include <cmath>
#include <functional>
#include <random>

#include "dropsynth/autograd.hpp"
#include "test_util.hpp"

using namespace dropsynth;
using namespace dropsynth::nn;
using dropsynth::testing::numeric_gradient;
using dropsynth::testing::random_tensor;
using dropsynth::testing::relative_error;

namespace {

using UnaryGraph = std::function<Var(const Var&)>;

// Compares the tape gradient of sum(f(x) * probe) with central differences.
void check_first_order(const UnaryGraph& f, const Tensor& x0, std::mt19937_64& rng, Scalar tol = 1e-6) {
  const Tensor probe = random_tensor(f(Var(x0)).shape(), rng);
  auto scalar = [&](const Tensor& x) { return sum(mul(f(Var(x)), constant(probe))).item(); };
  Var x(x0, true);
  const Var out = sum(mul(f(x), constant(probe)));
  const Tensor analytic = grad(out, std::span<const Var>(&x, 1))[0].value();
  CHECK(relative_error(analytic, numeric_gradient(scalar, x0)) < tol);
}

// Differentiates the squared gradient norm (double backprop) and compares it
// against central differences of the first-order tape gradient.
void check_second_order(const UnaryGraph& f, const Tensor& x0, Scalar tol = 1e-5) {
  auto grad_norm_sq = [&](const Tensor& x) {
    Var xv(x, true);
    const Var out = sum(f(xv));
    const Var g = grad(out, std::span<const Var>(&xv, 1))[0];
    Scalar total = 0;
    for (Scalar v : g.value().values()) total += v * v;
    return total;
  };
  Var x(x0, true);
  const Var out = sum(f(x));
  const Var g = grad(out, std::span<const Var>(&x, 1), true)[0];
  const Var penalty = sum(mul(g, g));
  const Tensor analytic = grad(penalty, std::span<const Var>(&x, 1))[0].value();
  CHECK(relative_error(analytic, numeric_gradient(grad_norm_sq, x0, 1e-5)) < tol);
}

}  // namespace

TEST_CASE("elementwise ops have correct first and second derivatives") {
  std::mt19937_64 rng(1);
  const Tensor x0 = random_tensor({2, 3}, rng, 0.5, 1.5);
  const Tensor other = random_tensor({2, 3}, rng, 0.5, 1.5);
  const std::vector<std::pair<const char*, UnaryGraph>> graphs = {
      {"mul", [&](const Var& x) { return mul(x, mul(x, constant(other))); }},
      {"div", [&](const Var& x) { return div(constant(other), mul(x, x)); }},
      {"pow", [](const Var& x) { return pow(x, 2.5); }},
      {"sigmoid", [](const Var& x) { return sigmoid(scale(x, 3)); }},
      {"softplus", [](const Var& x) { return mul(softplus(x), x); }},
      {"sub/neg", [&](const Var& x) { return neg(sub(mul(x, x), add_scalar(x, 2))); }},
  };
  for (const auto& [name, f] : graphs) {
    CAPTURE(name);
    check_first_order(f, x0, rng);
    check_second_order(f, x0);
  }
}

TEST_CASE("matmul gradients for every transpose flag") {
  std::mt19937_64 rng(2);
  for (int flags = 0; flags < 4; ++flags) {
    const bool ta = flags & 1, tb = flags & 2;
    const Tensor b0 = random_tensor(tb ? Shape{4, 3} : Shape{3, 4}, rng);
    const Tensor a0 = random_tensor(ta ? Shape{3, 2} : Shape{2, 3}, rng);
    CAPTURE(flags);
    // Gradient in a (b constant), then in b (a constant), each squared so the
    // second-order rules of matmul are exercised as well.
    check_first_order([&](const Var& a) { return matmul(a, constant(b0), ta, tb); }, a0, rng);
    check_first_order([&](const Var& b) { return matmul(constant(a0), b, ta, tb); }, b0, rng);
    check_second_order(
        [&](const Var& a) {
          const Var y = matmul(a, constant(b0), ta, tb);
          return mul(y, y);
        },
        a0);
    check_second_order(
        [&](const Var& b) {
          const Var y = matmul(constant(a0), b, ta, tb);
          return mul(y, y);
        },
        b0);
  }
}

TEST_CASE("conv2d gradients through input and weight, including double backprop") {
  std::mt19937_64 rng(3);
  const kernels::ConvGeometry same = kernels::ConvGeometry::same(3);
  const Tensor x0 = random_tensor({2, 2, 5, 5}, rng);
  const Tensor w0 = random_tensor({3, 2, 3, 3}, rng);
  check_first_order([&](const Var& x) { return conv2d(x, constant(w0), same); }, x0, rng);
  check_first_order([&](const Var& w) { return conv2d(constant(x0), w, same); }, w0, rng);
  // Nonlinear in x so the second derivative goes through conv2d_input_grad
  // and conv2d_weight_grad.
  auto net = [&](const Var& x) {
    const Var h = conv2d(x, constant(w0), same);
    return mul(h, h);
  };
  check_second_order(net, x0);

  // Mixed derivative: d/dw of ||d/dx sum(conv(x, w)^2)||^2.
  auto penalty_in_w = [&](const Tensor& w) {
    Var x(x0, true);
    const Var h = conv2d(x, constant(w), same);
    const Var g = grad(sum(mul(h, h)), std::span<const Var>(&x, 1))[0];
    Scalar total = 0;
    for (Scalar v : g.value().values()) total += v * v;
    return total;
  };
  Var x(x0, true);
  Var w(w0, true);
  const Var h = conv2d(x, w, same);
  const Var gx = grad(sum(mul(h, h)), std::span<const Var>(&x, 1), true)[0];
  const Tensor analytic = grad(sum(mul(gx, gx)), std::span<const Var>(&w, 1))[0].value();
  CHECK(relative_error(analytic, numeric_gradient(penalty_in_w, w0)) < 1e-5);
}

TEST_CASE("strided and rectangular convolutions differentiate correctly") {
  std::mt19937_64 rng(13);
  const Tensor x0 = random_tensor({1, 2, 7, 7}, rng);
  const Tensor w0 = random_tensor({2, 2, 3, 3}, rng);
  const kernels::ConvGeometry strided{2, 1, 1};
  check_second_order(
      [&](const Var& x) {
        const Var h = conv2d(x, constant(w0), strided);
        return mul(h, h);
      },
      x0);
  const Tensor w1 = random_tensor({2, 2, 1, 3}, rng);
  check_first_order([&](const Var& x) { return conv2d(x, constant(w1), {1, 0, 1}); }, x0, rng);
}

TEST_CASE("structural ops: broadcast, reshape, pooling, channels") {
  std::mt19937_64 rng(4);
  const Tensor x0 = random_tensor({2, 3, 4, 4}, rng);
  const std::vector<std::pair<const char*, UnaryGraph>> graphs = {
      {"sum_to", [](const Var& x) { return pow(sum_to(x, {1, 3, 1, 1}), 2); }},
      {"broadcast",
       [](const Var& x) { return mul(x, broadcast_to(sum_to(mul(x, x), {2, 1, 4, 4}), {2, 3, 4, 4})); }},
      {"reshape", [](const Var& x) { return pow(reshape(x, {6, 16}), 2); }},
      {"upsample", [](const Var& x) { return pow(upsample_nearest2x(x), 2); }},
      {"avg_pool", [](const Var& x) { return pow(avg_pool2x(x), 2); }},
      {"slice/pad",
       [](const Var& x) {
         return pow(concat_channels(slice_channels(x, 1, 3), pad_channels(slice_channels(x, 0, 1), 1, 1)), 2);
       }},
      {"mean", [](const Var& x) { return mul(x, broadcast_to(reshape(mean(mul(x, x)), {1, 1, 1, 1}), x.shape())); }},
  };
  for (const auto& [name, f] : graphs) {
    CAPTURE(name);
    check_first_order(f, x0, rng);
    check_second_order(f, x0);
  }
}

TEST_CASE("pixel_norm: formula, zero input, scale invariance, derivatives") {
  Tensor v({1, 2, 1, 1}, std::vector<Scalar>{3, 4});
  const Tensor out = pixel_norm(Var(v), 0).value();
  // mean square 12.5
  CHECK(out[0] == doctest::Approx(3 / std::sqrt(12.5)));
  CHECK(out[1] == doctest::Approx(4 / std::sqrt(12.5)));
  CHECK(out[0] == doctest::Approx(0.8485).epsilon(1e-4));
  CHECK(out[1] == doctest::Approx(1.1314).epsilon(1e-4));

  const Tensor zeros({2, 4, 3, 3});
  CHECK(pixel_norm(Var(zeros), 1e-8).value() == zeros);

  std::mt19937_64 rng(5);
  const Tensor x0 = random_tensor({2, 5, 3, 3}, rng);
  Tensor scaled = x0;
  for (auto& e : scaled.values()) e *= 7.5;
  CHECK(max_abs_diff(pixel_norm(Var(x0), 1e-12).value(), pixel_norm(Var(scaled), 1e-12).value()) < 1e-9);

  check_first_order([](const Var& x) { return pixel_norm(x, 1e-8); }, x0, rng);
  check_second_order([](const Var& x) { return pixel_norm(x, 1e-8); }, x0, 1e-4);
}

TEST_CASE("pixel_norm output has unit mean square per position") {
  std::mt19937_64 rng(6);
  const Tensor x = Tensor::randn({3, 16, 4, 4}, rng);
  const Tensor y = pixel_norm(Var(x), 1e-8).value();
  for (std::size_t n = 0; n < 3; ++n)
    for (std::size_t r = 0; r < 4; ++r)
      for (std::size_t c = 0; c < 4; ++c) {
        Scalar ms = 0;
        for (std::size_t ch = 0; ch < 16; ++ch) ms += y.at(n, ch, r, c) * y.at(n, ch, r, c);
        CHECK(ms / 16 == doctest::Approx(1).epsilon(1e-4));
      }
}

TEST_CASE("leaky relu has piecewise slopes and zero curvature") {
  std::mt19937_64 rng(7);
  Tensor x0 = random_tensor({3, 4}, rng);
  for (auto& v : x0.values()) v += v > 0 ? 0.1 : -0.1;  // keep away from the kink
  check_first_order([](const Var& x) { return leaky_relu(x, 0.2); }, x0, rng);
  check_second_order([](const Var& x) { return mul(leaky_relu(x, 0.2), x); }, x0);
}

TEST_CASE("gradients accumulate over shared subexpressions and skip unrelated inputs") {
  Var x(Tensor({1}, 3.0), true);
  Var unrelated(Tensor({2}, 1.0), true);
  const Var y = add(mul(x, x), mul(x, x));  // 2x^2
  const auto g = grad(y, std::vector<Var>{x, unrelated});
  CHECK(g[0].item() == doctest::Approx(12));
  CHECK(g[1].value() == Tensor({2}));
}

TEST_CASE("no-grad mode records nothing") {
  Var x(Tensor({2}, 1.0), true);
  NoGradGuard guard;
  const Var y = mul(x, x);
  CHECK_FALSE(y.requires_grad());
  CHECK(y.is_leaf());
}
