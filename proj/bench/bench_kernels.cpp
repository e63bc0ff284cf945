// Parallel kernels vs. the serial reference loops on network-sized shapes.

#include <benchmark/benchmark.h>

#include <random>

#include "dropsynth/kernels.hpp"

namespace {

using dropsynth::Shape;
using dropsynth::Tensor;
namespace k = dropsynth::kernels;

Tensor random(Shape shape) {
  std::mt19937_64 rng(42);
  return Tensor::uniform(std::move(shape), rng, -1, 1);
}

template <bool Serial>
void BM_Gemm(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const Tensor a = random({n, n});
  const Tensor b = random({n, n});
  for (auto _ : state) {
    Tensor c = Serial ? k::serial::matmul(a, b) : k::matmul(a, b);
    benchmark::DoNotOptimize(c.data());
  }
  state.counters["GFLOPS"] =
      benchmark::Counter(2.0 * n * n * n, benchmark::Counter::kIsIterationInvariantRate, benchmark::Counter::kIs1000);
}

// Generator block convolution: 3x3, same padding.
template <bool Serial>
void BM_Conv3x3(benchmark::State& state) {
  const auto c = static_cast<std::size_t>(state.range(0));
  const auto r = static_cast<std::size_t>(state.range(1));
  const Tensor x = random({1, c, r, r});
  const Tensor w = random({c, c, 3, 3});
  const auto g = k::ConvGeometry::same(3);
  for (auto _ : state) {
    Tensor y = Serial ? k::serial::conv2d(x, w, g) : k::conv2d(x, w, g);
    benchmark::DoNotOptimize(y.data());
  }
  state.counters["GFLOPS"] = benchmark::Counter(2.0 * c * c * 9 * r * r, benchmark::Counter::kIsIterationInvariantRate,
                                                benchmark::Counter::kIs1000);
}

template <bool Serial>
void BM_ConvWeightGrad(benchmark::State& state) {
  const auto c = static_cast<std::size_t>(state.range(0));
  const auto r = static_cast<std::size_t>(state.range(1));
  const Tensor x = random({8, c, r, r});
  const Tensor gy = random({8, c, r, r});
  const auto g = k::ConvGeometry::same(3);
  for (auto _ : state) {
    Tensor gw = Serial ? k::serial::conv2d_weight_grad(x, gy, {c, c, 3, 3}, g)
                       : k::conv2d_weight_grad(x, gy, {c, c, 3, 3}, g);
    benchmark::DoNotOptimize(gw.data());
  }
}

template <bool Serial>
void BM_PixelNorm(benchmark::State& state) {
  const Tensor x = random({8, 64, 32, 32});
  for (auto _ : state) {
    Tensor y = Serial ? k::serial::pixel_norm(x, 1e-8) : k::pixel_norm(x, 1e-8);
    benchmark::DoNotOptimize(y.data());
  }
}

template <bool Serial>
void BM_AreaResize(benchmark::State& state) {
  const Tensor x = random({1, 1, 640, 640});
  for (auto _ : state) {
    Tensor y = Serial ? k::serial::area_resize(x, 64, 64) : k::area_resize(x, 64, 64);
    benchmark::DoNotOptimize(y.data());
  }
}

}  // namespace

BENCHMARK(BM_Gemm<false>)->Arg(128)->Arg(512);
BENCHMARK(BM_Gemm<true>)->Arg(128)->Arg(512);
BENCHMARK(BM_Conv3x3<false>)->Args({32, 64})->Args({128, 16});
BENCHMARK(BM_Conv3x3<true>)->Args({32, 64})->Args({128, 16});
BENCHMARK(BM_ConvWeightGrad<false>)->Args({32, 16});
BENCHMARK(BM_ConvWeightGrad<true>)->Args({32, 16});
BENCHMARK(BM_PixelNorm<false>);
BENCHMARK(BM_PixelNorm<true>);
BENCHMARK(BM_AreaResize<false>);
BENCHMARK(BM_AreaResize<true>);

BENCHMARK_MAIN();
