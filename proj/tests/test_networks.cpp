#include <doctest.h>

#include <random>

#include "dropsynth/error.hpp"
#include "dropsynth/networks.hpp"
#include "test_util.hpp"

using namespace dropsynth;
using namespace dropsynth::gan;
using dropsynth::testing::numeric_gradient;
using dropsynth::testing::relative_error;

namespace {

NetworkConfig small_config(int max_stage = 5) {
  NetworkConfig c;
  c.latent_dim = 12;
  c.image_channels = 1;
  c.channels = {8, 8, 6, 4, 4, 2, 2, 2, 2};
  c.max_stage = max_stage;
  return c;
}

Generator grown_generator(int stage, std::uint64_t seed, const NetworkConfig& cfg = small_config()) {
  std::mt19937_64 rng(seed);
  Generator g(cfg, rng);
  while (g.active_stage() < stage) g.grow(rng);
  return g;
}

Discriminator grown_discriminator(int stage, std::uint64_t seed, const NetworkConfig& cfg = small_config()) {
  std::mt19937_64 rng(seed);
  Discriminator d(cfg, rng);
  while (d.active_stage() < stage) d.grow(rng);
  return d;
}

}  // namespace

TEST_CASE("generator output is 2^(i+1) square at every stage") {
  const Generator g = grown_generator(5, 1);
  std::mt19937_64 rng(2);
  const Tensor z = g.sample_latents(2, rng);
  for (int stage = 1; stage <= 5; ++stage) {
    const std::size_t r = std::size_t{1} << (stage + 1);
    CHECK(g.sample(z, stage, 1.0).shape() == Shape{2, 1, r, r});
    CHECK(g.sample(z, stage, 0.5).shape() == Shape{2, 1, r, r});
  }
  CHECK_THROWS_AS(g.sample(z, 6, 1.0), InvalidArgument);
  CHECK_THROWS_AS(g.sample(z, 0, 1.0), InvalidArgument);
  CHECK_THROWS_AS(g.sample(z, 2, 1.5), InvalidArgument);
  CHECK_THROWS_AS(g.sample(Tensor({2, 5}), 1, 1.0), InvalidArgument);
}

TEST_CASE("generator at alpha 0 is the upsampled previous-stage image") {
  const Generator g = grown_generator(4, 3);
  std::mt19937_64 rng(4);
  const Tensor z = g.sample_latents(3, rng);
  for (int stage = 2; stage <= 4; ++stage) {
    const Tensor blended = g.sample(z, stage, 0.0);
    const Tensor previous = kernels::upsample_nearest2x(g.sample(z, stage - 1, 1.0));
    CHECK(max_abs_diff(blended, previous) <= 1e-6);
  }
}

TEST_CASE("discriminator shape contract and resolution checks") {
  const Discriminator d = grown_discriminator(3, 5);
  std::mt19937_64 rng(6);
  const Tensor images = Tensor::uniform({8, 1, 16, 16}, rng, -1, 1);
  CHECK(d.score(images, 3, 1.0).shape() == Shape{8});
  CHECK_THROWS_AS(d.score(images, 2, 1.0), InvalidArgument);
  CHECK_THROWS_AS(d.score(Tensor({8, 3, 16, 16}), 3, 1.0), InvalidArgument);
  CHECK_THROWS_AS(d.score(Tensor({1, 1, 32, 32}), 4, 1.0), InvalidArgument);
}

TEST_CASE("discriminator at alpha 0 scores the downsampled input with the previous stage") {
  for (bool mbstd : {true, false}) {
    NetworkConfig cfg = small_config();
    cfg.minibatch_stddev = mbstd;
    const Discriminator d = grown_discriminator(4, 7, cfg);
    std::mt19937_64 rng(8);
    for (int stage = 2; stage <= 4; ++stage) {
      const std::size_t r = std::size_t{1} << (stage + 1);
      const Tensor x = Tensor::uniform({4, 1, r, r}, rng, -1, 1);
      const Tensor blended = d.score(x, stage, 0.0);
      const Tensor previous = d.score(kernels::avg_pool2d(x, 2, 2, 0, true), stage - 1, 1.0);
      CHECK(max_abs_diff(blended, previous) <= 1e-6);
    }
  }
}

TEST_CASE("duplicated images get identical scores") {
  const Discriminator d = grown_discriminator(2, 9);
  std::mt19937_64 rng(10);
  const Tensor one = Tensor::uniform({1, 1, 8, 8}, rng, -1, 1);
  Tensor batch({4, 1, 8, 8});
  for (std::size_t n = 0; n < 4; ++n) std::copy(one.data(), one.data() + 64, batch.data() + n * 64);
  const Tensor s = d.score(batch, 2, 0.7);
  for (std::size_t n = 1; n < 4; ++n) CHECK(s[n] == s[0]);
}

TEST_CASE("grow keeps old weights bit-identical and resets alpha") {
  std::mt19937_64 rng(11);
  Generator g(small_config(), rng);
  g.grow(rng);
  g.set_alpha(1.0);
  const TensorMap before = g.state();
  std::mt19937_64 zr(12);
  const Tensor z = g.sample_latents(2, zr);
  const Tensor out_before = g.sample(z, 2, 1.0);

  g.grow(rng);
  CHECK(g.active_stage() == 3);
  CHECK(g.alpha() == 0.0);
  const TensorMap after = g.state();
  for (const auto& [name, t] : before) {
    REQUIRE(after.count(name) == 1);
    CHECK(after.at(name) == t);
  }
  CHECK(after.size() > before.size());
  CHECK(after.count("g.b3.conv1.w") == 1);
  CHECK(after.count("g.rgb3.w") == 1);
  CHECK(max_abs_diff(g.sample(z, 3, 0.0), kernels::upsample_nearest2x(out_before)) <= 1e-6);
  CHECK(g.sample(z, 2, 1.0) == out_before);
}

TEST_CASE("grow rejects skipped stages, stages past the ladder and widening channels") {
  std::mt19937_64 rng(13);
  Generator g(small_config(), rng);
  CHECK_THROWS_AS(g.grow(StageConfig{3, 16, 4}, rng), InvalidArgument);
  CHECK_THROWS_AS(g.grow(StageConfig{2, 16, 4}, rng), InvalidArgument);
  CHECK_THROWS_AS(g.grow(StageConfig{2, 8, 16}, rng), InvalidArgument);
  CHECK_NOTHROW(g.grow(StageConfig{2, 8, 4}, rng));

  NetworkConfig full = small_config(9);
  Discriminator d = grown_discriminator(9, 14, full);
  CHECK(d.active_stage() == 9);
  CHECK_THROWS_AS(d.grow(rng), InvalidArgument);
  CHECK_THROWS_AS(d.grow(StageConfig{10, 2048, 2}, rng), InvalidArgument);
  CHECK_THROWS_AS(StageConfig::of(full, 10), InvalidArgument);

  NetworkConfig bad = small_config();
  bad.channels = {4, 8, 8, 8, 8};
  CHECK_THROWS_AS(bad.validate(), InvalidArgument);
}

TEST_CASE("fade-in is Lipschitz in alpha") {
  const Generator g = grown_generator(3, 15);
  const Discriminator d = grown_discriminator(3, 16);
  std::mt19937_64 rng(17);
  const Tensor z = g.sample_latents(2, rng);
  const Tensor x = Tensor::uniform({2, 1, 16, 16}, rng, -1, 1);
  const Tensor g0 = g.sample(z, 3, 0.0), g1 = g.sample(z, 3, 1.0);
  const Tensor d0 = d.score(x, 3, 0.0), d1 = d.score(x, 3, 1.0);
  for (double a : {0.0, 0.25, 0.5, 0.999}) {
    for (double delta : {1e-3, 1e-4}) {
      // The generator blend is linear in alpha, so the change is exactly
      // delta times the gap between the two paths.
      CHECK(max_abs_diff(g.sample(z, 3, a), g.sample(z, 3, std::min(1.0, a + delta))) <=
            delta * max_abs_diff(g0, g1) * (1 + 1e-6) + 1e-12);
      CHECK(max_abs_diff(d.score(x, 3, a), d.score(x, 3, std::min(1.0, a + delta))) <=
            50 * delta * (1 + max_abs_diff(d0, d1)));
    }
  }
}

TEST_CASE("forward passes are deterministic and copies are independent") {
  const Generator g = grown_generator(2, 18);
  std::mt19937_64 rng(19);
  const Tensor z = g.sample_latents(3, rng);
  CHECK(g.sample(z, 2, 0.3) == g.sample(z, 2, 0.3));
  CHECK(grown_generator(2, 18).sample(z, 2, 0.3) == g.sample(z, 2, 0.3));

  Generator copy = g;
  copy.parameters().begin()->second.node()->value[0] += 1.0;
  CHECK(copy.sample(z, 2, 1.0) != g.sample(z, 2, 1.0));
}

TEST_CASE("load_state restores weights and rejects mismatched maps") {
  const Generator a = grown_generator(3, 20);
  Generator b = grown_generator(3, 21);
  std::mt19937_64 rng(22);
  const Tensor z = a.sample_latents(2, rng);
  CHECK(a.sample(z, 3, 1.0) != b.sample(z, 3, 1.0));
  b.load_state(a.state());
  CHECK(a.sample(z, 3, 1.0) == b.sample(z, 3, 1.0));

  TensorMap missing = a.state();
  missing.erase("g.rgb2.b");
  CHECK_THROWS_AS(b.load_state(missing), InvalidArgument);
  TensorMap reshaped = a.state();
  reshaped["g.rgb2.b"] = Tensor({2});
  CHECK_THROWS_AS(b.load_state(reshaped), InvalidArgument);
  CHECK_THROWS_AS(b.parameter("g.nope"), InvalidArgument);
}

TEST_CASE("network gradients match finite differences") {
  NetworkConfig cfg = small_config();
  cfg.channels = {3, 3, 2, 2, 2, 2, 2, 2, 2};
  cfg.latent_dim = 4;
  const Generator g = grown_generator(2, 23, cfg);
  const Discriminator d = grown_discriminator(2, 24, cfg);
  std::mt19937_64 rng(25);
  const Tensor z = g.sample_latents(2, rng);

  // d(sum D(G(z)))/dz through both networks mid fade-in.
  auto f = [&](const Tensor& zz) { return d.score(g.sample(zz, 2, 0.4), 2, 0.4).sum(); };
  nn::Var zv(z, true);
  const nn::Var out = nn::sum(d.forward(g.forward(zv, 2, 0.4), 2, 0.4));
  const auto grads = nn::grad(out, std::span<const nn::Var>(&zv, 1));
  CHECK(relative_error(grads[0].value(), numeric_gradient(f, z)) < 1e-6);

  // And with respect to one critic weight.
  const std::string name = "d.b2.conv1.w";
  const nn::Var w = d.parameter(name);
  const Tensor x = g.sample(z, 2, 0.4);
  const auto gw = nn::grad(nn::sum(d.forward(nn::Var(x), 2, 0.4)), std::span<const nn::Var>(&w, 1));
  Discriminator probe = d;
  auto fw = [&](const Tensor& wt) {
    TensorMap s = probe.state();
    s[name] = wt;
    probe.load_state(s);
    return probe.score(x, 2, 0.4).sum();
  };
  CHECK(relative_error(gw[0].value(), numeric_gradient(fw, w.value())) < 1e-6);
}

TEST_CASE("minibatch stddev feature") {
  Tensor h({2, 1, 1, 2}, std::vector<Scalar>{0, 0, 2, 4});
  const Tensor out = minibatch_stddev(nn::Var(h), 0).value();
  REQUIRE(out.shape() == Shape{2, 2, 1, 2});
  // Per-position std over the batch: 1 and 2, averaged to 1.5.
  CHECK(out.at(0, 1, 0, 0) == doctest::Approx(1.5));
  CHECK(out.at(1, 1, 0, 1) == doctest::Approx(1.5));
  CHECK(out.at(1, 0, 0, 1) == 4);
}
