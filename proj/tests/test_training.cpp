#include <doctest.h>

#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include <fmt/format.h>

#include "dropsynth/procedural.hpp"
#include "dropsynth/training.hpp"
#include "test_util.hpp"

using namespace dropsynth;
using namespace dropsynth::gan;
using dropsynth::testing::numeric_gradient;
using dropsynth::testing::relative_error;
using dropsynth::testing::TempDir;
using nn::Var;
namespace fs = std::filesystem;

namespace {

Var scores(std::vector<Scalar> v) {
  const std::size_t n = v.size();
  return Var(Tensor({n}, std::move(v)));
}

// D(x) = sum_k w_k x_k per sample, for a flat N x K batch.
Critic linear_critic(const Tensor& w) {
  return [w](const Var& x) {
    const std::size_t n = x.shape()[0];
    return nn::reshape(nn::matmul(nn::reshape(x, {n, w.size()}), Var(w.reshaped({w.size(), 1}))), {n});
  };
}

// Smooth nonlinear critic: sum softplus(x W) + 0.1 * sum x^2, per sample.
Critic smooth_critic(const Tensor& w) {
  return [w](const Var& x) {
    const std::size_t n = x.shape()[0], k = w.dim(0);
    const Var flat = nn::reshape(x, {n, k});
    const Var h = nn::softplus(nn::matmul(flat, Var(w)));
    const Var s = nn::add(nn::sum_to(h, {n, 1}), nn::scale(nn::sum_to(nn::mul(flat, flat), {n, 1}), 0.1));
    return nn::reshape(s, {n});
  };
}

NetworkConfig tiny_network(int max_stage) {
  NetworkConfig c;
  c.latent_dim = 8;
  c.channels = {6, 6, 4, 4, 4, 4, 4, 4, 4};
  c.max_stage = max_stage;
  return c;
}

TrainSchedule tiny_schedule(int max_stage, std::uint64_t images) {
  TrainSchedule s;
  s.network = tiny_network(max_stage);
  s.max_stage = max_stage;
  for (int i = 0; i < max_stage; ++i) s.stages.push_back({images, images, 8});
  return s;
}

imaging::DatasetManifest procedural_manifest(const TempDir& dir, std::size_t count, std::size_t resolution) {
  procedural::SceneOptions scene;
  scene.resolution = resolution;
  procedural::write_corpus(dir / "raw", count, scene, 77);
  return imaging::prepare_dataset(dir / "raw", dir / "data", {resolution, {1.0, 0.0, 0.0}, 1, 1});
}

std::vector<nlohmann::json> read_log(const fs::path& path) {
  std::ifstream in(path);
  std::vector<nlohmann::json> out;
  for (std::string line; std::getline(in, line);) out.push_back(nlohmann::json::parse(line));
  return out;
}

std::string file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("minimax losses in both modes") {
  Losses w = minimax_losses(scores({1, 1}), scores({0, 0}), LossMode::wasserstein);
  CHECK(w.d_loss_core.item() == -1);
  CHECK(w.g_loss.item() == 0);
  w = minimax_losses(scores({0.3, -2}), scores({0.3, -2}), LossMode::wasserstein);
  CHECK(w.d_loss_core.item() == 0);

  const Losses s = minimax_losses(scores({0, 0, 0}), scores({0, 0, 0}), LossMode::standard);
  CHECK(s.d_loss_core.item() == doctest::Approx(-2 * std::log(0.5)).epsilon(1e-12));
  CHECK(s.g_loss.item() == doctest::Approx(-std::log(0.5)).epsilon(1e-12));

  try {
    minimax_losses(scores({0, 1}), scores({std::nan(""), 0}), LossMode::wasserstein);
    FAIL("expected an error");
  } catch (const InvalidArgument& e) {
    CHECK(std::string(e.what()).find("d_fake") != std::string::npos);
  }
  CHECK_THROWS_AS(minimax_losses(scores({}), scores({}), LossMode::standard), InvalidArgument);
  CHECK_THROWS_AS(minimax_losses(scores({1}), scores({1, 2}), LossMode::standard), InvalidArgument);
  CHECK(parse_loss_mode("standard") == LossMode::standard);
  CHECK_THROWS_AS(parse_loss_mode("hinge"), InvalidArgument);
}

TEST_CASE("gradient penalty of linear critics") {
  std::mt19937_64 rng(1);
  const Tensor real = Tensor::uniform({5, 4}, rng, -1, 1), fake = Tensor::uniform({5, 4}, rng, -1, 1);
  const Tensor unit({4}, std::vector<Scalar>{0.5, 0.5, 0.5, 0.5});
  CHECK(gradient_penalty(linear_critic(unit), real, fake, 10, rng).penalty.item() == 0.0);

  const Tensor three({4}, std::vector<Scalar>{3, 0, 0, 0});
  const PenaltyResult r = gradient_penalty(linear_critic(three), real, fake, 10, rng);
  CHECK(std::abs(r.penalty.item() - 40.0) <= 1e-4);
  CHECK(r.gradient_norms.shape() == Shape{5});
  CHECK(r.gradient_norms[2] == doctest::Approx(3));

  CHECK(gradient_penalty(linear_critic(three), real, fake, 0, rng).penalty.item() == 0.0);
  CHECK_THROWS_AS(gradient_penalty(linear_critic(three), real, fake, -1, rng), InvalidArgument);

  // A flat critic has zero gradient: the penalty is lambda, with no NaN anywhere.
  const Tensor zero({4});
  const PenaltyResult z = gradient_penalty(linear_critic(zero), real, fake, 2, rng);
  CHECK(z.penalty.item() == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(z.penalty.value().all_finite());
}

TEST_CASE("penalty gradient norms match finite differences on a smooth critic") {
  std::mt19937_64 rng(2);
  const Tensor w = Tensor::uniform({6, 3}, rng, -1, 1);
  const Critic critic = smooth_critic(w);
  const Tensor xhat = Tensor::uniform({4, 6}, rng, -1, 1);
  const PenaltyResult r = gradient_penalty_at(critic, xhat, 10);
  Scalar expected = 0;
  for (std::size_t n = 0; n < 4; ++n) {
    const Tensor row({1, 6}, std::vector<Scalar>(xhat.data() + n * 6, xhat.data() + n * 6 + 6));
    const Tensor fd = numeric_gradient([&](const Tensor& t) { return critic(Var(t)).value()[0]; }, row);
    const Scalar fd_norm = std::sqrt(std::inner_product(fd.data(), fd.data() + 6, fd.data(), 0.0));
    CHECK(std::abs(r.gradient_norms[n] - fd_norm) / fd_norm < 1e-3);
    expected += (fd_norm - 1) * (fd_norm - 1);
  }
  CHECK(r.penalty.item() == doctest::Approx(10 * expected / 4).epsilon(1e-3));
}

TEST_CASE("penalty differentiates through the critic's weights") {
  // d penalty / d w for a critic with trainable weights, against finite
  // differences of the penalty value.
  std::mt19937_64 rng(3);
  const Tensor xhat = Tensor::uniform({3, 5}, rng, -1, 1);
  const Tensor w0 = Tensor::uniform({5, 2}, rng, -1, 1);
  auto penalty_of = [&](const Tensor& w) { return gradient_penalty_at(smooth_critic(w), xhat, 3).penalty.item(); };
  const Var wv(w0, true);
  const Critic critic = [&](const Var& x) {
    const Var flat = nn::reshape(x, {3, 5});
    const Var s = nn::add(nn::sum_to(nn::softplus(nn::matmul(flat, wv)), {3, 1}),
                          nn::scale(nn::sum_to(nn::mul(flat, flat), {3, 1}), 0.1));
    return nn::reshape(s, {3});
  };
  const Var pen = gradient_penalty_at(critic, xhat, 3).penalty;
  const auto g = nn::grad(pen, std::span<const Var>(&wv, 1));
  CHECK(relative_error(g[0].value(), numeric_gradient(penalty_of, w0)) < 1e-6);

  // Same through a real critic network mid fade-in.
  std::mt19937_64 net_rng(4);
  Discriminator d(tiny_network(2), net_rng);
  d.grow(net_rng);
  const Tensor x = Tensor::uniform({3, 1, 8, 8}, net_rng, -1, 1);
  const std::string name = "d.b2.conv2.w";
  const Var p = d.parameter(name);
  const auto gp = nn::grad(gradient_penalty_at([&](const Var& v) { return d.forward(v, 2, 0.5); }, x, 1).penalty,
                           std::span<const Var>(&p, 1));
  Discriminator probe = d;
  auto f = [&](const Tensor& t) {
    TensorMap s = probe.state();
    s[name] = t;
    probe.load_state(s);
    return gradient_penalty_at([&](const Var& v) { return probe.forward(v, 2, 0.5); }, x, 1, false).penalty.item();
  };
  CHECK(relative_error(gp[0].value(), numeric_gradient(f, p.value())) < 1e-5);
}

TEST_CASE("interpolates stay inside each real/fake interval (property)") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + trial % 7;
    const Tensor real = Tensor::uniform({n, 3, 2, 2}, rng, -3, 3);
    Tensor fake = Tensor::uniform({n, 3, 2, 2}, rng, -3, 3);
    if (trial % 5 == 0) fake = real;
    Tensor eps = Tensor::uniform({n}, rng, 0, 1);
    if (trial % 11 == 0) eps[0] = 1;
    const Tensor x = interpolate(real, fake, eps);
    for (std::size_t k = 0; k < x.size(); ++k) {
      CHECK(x[k] >= std::min(real[k], fake[k]));
      CHECK(x[k] <= std::max(real[k], fake[k]));
    }
  }
  CHECK_THROWS_AS(interpolate(Tensor({2, 3}), Tensor({2, 4}), Tensor({2})), InvalidArgument);
}

TEST_CASE("a penalty-only step with a huge lambda reduces the penalty") {
  std::mt19937_64 rng(6);
  Discriminator d(tiny_network(1), rng);
  const Tensor real = Tensor::uniform({6, 1, 4, 4}, rng, -1, 1), fake = Tensor::uniform({6, 1, 4, 4}, rng, -1, 1);
  const Tensor xhat = interpolate(real, fake, Tensor::uniform({6}, rng, 0, 1));
  const Critic critic = [&](const Var& x) { return d.forward(x); };
  const PenaltyResult before = gradient_penalty_at(critic, xhat, 1e4);
  const auto params = d.parameter_list();
  const auto grads = nn::grad(before.penalty, params);
  Scalar norm2 = 0;
  for (const auto& g : grads)
    for (std::size_t k = 0; k < g.value().size(); ++k) norm2 += g.value()[k] * g.value()[k];
  const Scalar step = 1e-3 / std::sqrt(norm2);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Var leaf = params[i];
    for (std::size_t k = 0; k < leaf.value().size(); ++k) leaf.mutable_value()[k] -= step * grads[i].value()[k];
  }
  const PenaltyResult after = gradient_penalty_at(critic, xhat, 1e4, false);
  CHECK(after.penalty.item() < before.penalty.item());
}

TEST_CASE("Adam first step moves each weight by about lr against its gradient") {
  Var w(Tensor({3}, std::vector<Scalar>{1, 2, 3}), true);
  ParameterMap params{{"w", w}};
  Adam opt({0.1, 0.0, 0.99, 1e-8});
  opt.step(params, {Var(Tensor({3}, std::vector<Scalar>{2, -0.5, 0}))});
  CHECK(w.value()[0] == doctest::Approx(0.9));
  CHECK(w.value()[1] == doctest::Approx(2.1));
  CHECK(w.value()[2] == 3);

  TensorMap tensors;
  nlohmann::json meta;
  opt.save_state("g", tensors, meta);
  CHECK(tensors.count("opt.g.m.w") == 1);
  Adam copy({0.1, 0.0, 0.99, 1e-8});
  copy.load_state("g", tensors, meta);
  Var w2(w.value(), true);
  ParameterMap p2{{"w", w2}};
  const Var g(Tensor({3}, std::vector<Scalar>{1, 1, 1}));
  opt.step(params, {g});
  copy.step(p2, {g});
  CHECK(w.value() == w2.value());
}

TEST_CASE("schedule config round trip, hash and validation") {
  const TrainSchedule paper = TrainSchedule::paper_scale();
  CHECK(paper.stages.size() == 9);
  CHECK(paper.lambda == 10);
  CHECK(paper.n_critic == 1);
  CHECK(paper.g_optimizer.lr == 1e-3);
  CHECK(paper.g_optimizer.beta1 == 0.0);
  CHECK(paper.g_optimizer.beta2 == 0.99);
  CHECK(paper.network.latent_dim == 512);
  CHECK_NOTHROW(paper.validate());

  TempDir dir("schedule");
  TrainSchedule s = tiny_schedule(3, 64);
  s.mode = LossMode::standard;
  s.save(dir / "train.json");
  const TrainSchedule back = TrainSchedule::load(dir / "train.json");
  CHECK(back.hash() == s.hash());
  CHECK(back.mode == LossMode::standard);
  s.lambda = 5;
  CHECK(back.hash() != s.hash());

  TrainSchedule bad = tiny_schedule(3, 64);
  bad.stages[1].fade_images = 0;
  CHECK_THROWS_AS(bad.validate(), InvalidArgument);
  bad = tiny_schedule(3, 64);
  bad.lambda = -1;
  CHECK_THROWS_AS(bad.validate(), InvalidArgument);
  bad = tiny_schedule(3, 64);
  bad.max_stage = 4;
  CHECK_THROWS_AS(bad.validate(), InvalidArgument);
}

TEST_CASE("checkpoint round trip is bit-exact") {
  TempDir dir("ckpt");
  std::mt19937_64 rng(7);
  Generator g(tiny_network(3), rng);
  Discriminator d(tiny_network(3), rng);
  g.grow(rng);
  d.grow(rng);
  g.set_alpha(0.37);
  d.set_alpha(0.37);
  GanCheckpoint ck = make_checkpoint(g, d, "0123456789abcdef", 4242);
  ck.trainer = {{"phase", "fade"}};
  ck.save(dir / "a.ckpt");
  const GanCheckpoint back = GanCheckpoint::load(dir / "a.ckpt");
  CHECK(back.stage == 2);
  CHECK(back.alpha == 0.37);
  CHECK(back.images_seen == 4242);
  CHECK(back.config_hash == ck.config_hash);
  CHECK(back.trainer == ck.trainer);
  CHECK(back.tensors == ck.tensors);
  CHECK(back.id() == "01234567-s2-4242");

  const Tensor z = g.sample_latents(3, rng);
  CHECK(back.generator().sample(z, 2, 0.37) == g.sample(z, 2, 0.37));
  const Tensor x = Tensor::uniform({3, 1, 8, 8}, rng, -1, 1);
  CHECK(back.discriminator().score(x, 2, 0.37) == d.score(x, 2, 0.37));

  back.save(dir / "b.ckpt");
  CHECK(file_bytes(dir / "a.ckpt") == file_bytes(dir / "b.ckpt"));

  const std::string bytes = file_bytes(dir / "a.ckpt");
  std::ofstream(dir / "trunc.ckpt", std::ios::binary) << bytes.substr(0, bytes.size() - 9);
  CHECK_THROWS_AS(GanCheckpoint::load(dir / "trunc.ckpt"), IoError);
  std::ofstream(dir / "junk.ckpt", std::ios::binary) << "not a checkpoint at all";
  CHECK_THROWS_AS(GanCheckpoint::load(dir / "junk.ckpt"), IoError);
  CHECK_THROWS_AS(GanCheckpoint::load(dir / "missing.ckpt"), IoError);
}

TEST_CASE("fade_real_batch blends toward the blurred image") {
  std::mt19937_64 rng(8);
  const Tensor x = Tensor::uniform({2, 1, 4, 4}, rng, -1, 1);
  CHECK(fade_real_batch(x, 1.0) == x);
  const Tensor blurred = kernels::upsample_nearest2x(kernels::avg_pool2d(x, 2, 2, 0, true));
  CHECK(max_abs_diff(fade_real_batch(x, 0.0), blurred) < 1e-15);
}

TEST_CASE("two-stage smoke run on 64 procedural images") {
  TempDir dir("smoke");
  const auto manifest = procedural_manifest(dir, 64, 8);
  TrainSchedule s = tiny_schedule(2, 48);
  s.checkpoint_interval = 40;
  std::vector<StepRecord> steps;
  TrainOptions opts;
  opts.out_dir = dir / "run";
  opts.seed = 11;
  opts.on_step = [&](const StepRecord& r) { steps.push_back(r); };
  const TrainResult result = train(manifest, s, opts);
  CHECK(result.completed);

  int stage_checkpoints = 0;
  std::size_t last_res = 0;
  for (const auto& ev : result.checkpoints) {
    if (ev.reason == "stage") ++stage_checkpoints;
    const auto ck = GanCheckpoint::load(ev.path);
    const std::size_t res = imaging::ResolutionLadder::resolution_of(ck.stage);
    CHECK(res >= last_res);
    last_res = res;
  }
  CHECK(stage_checkpoints == 2);
  CHECK(result.checkpoints.size() > 2);

  // Alpha never decreases within a stage and restarts at 0 after growing.
  REQUIRE(!steps.empty());
  for (std::size_t i = 1; i < steps.size(); ++i) {
    CHECK(steps[i].images_seen > steps[i - 1].images_seen);
    if (steps[i].stage == steps[i - 1].stage) CHECK(steps[i].alpha >= steps[i - 1].alpha);
    else CHECK(steps[i].alpha == 0.0);
    CHECK(std::isfinite(steps[i].d_loss));
    CHECK(std::isfinite(steps[i].g_loss));
  }

  const auto log = read_log(dir / "run" / "train_log.ndjson");
  CHECK(log.size() == steps.size());
  for (const char* key : {"step", "stage", "alpha", "d_loss", "g_loss", "penalty"}) CHECK(log.back().contains(key));

  const auto final_ck = GanCheckpoint::load(result.final_checkpoint);
  CHECK(final_ck.stage == 2);
  const auto images = generate(final_ck, 3, 5, dir / "gen");
  REQUIRE(images.size() == 3);
  CHECK(images[0].pixels.shape() == Shape{1, 8, 8});
}

TEST_CASE("resuming continues exactly where an interrupted run stopped") {
  TempDir dir("resume");
  const auto manifest = procedural_manifest(dir, 24, 8);
  TrainSchedule s = tiny_schedule(2, 32);
  s.checkpoint_interval = 16;

  TrainOptions full;
  full.out_dir = dir / "full";
  full.seed = 3;
  const TrainResult a = train(manifest, s, full);

  TrainOptions part = full;
  part.out_dir = dir / "part";
  part.max_steps = 5;
  const TrainResult b = train(manifest, s, part);
  CHECK_FALSE(b.completed);
  REQUIRE(!b.checkpoints.empty());

  TrainOptions cont = part;
  cont.max_steps.reset();
  cont.resume = b.checkpoints.back().path;
  const TrainResult c = train(manifest, s, cont);
  CHECK(c.completed);
  CHECK(c.images_seen == a.images_seen);
  CHECK(GanCheckpoint::load(c.final_checkpoint).tensors == GanCheckpoint::load(a.final_checkpoint).tensors);

  // Images seen keep growing across the resume boundary in the appended log.
  const auto log = read_log(dir / "part" / "train_log.ndjson");
  for (std::size_t i = 1; i < log.size(); ++i) {
    if (log[i]["step"] > log[i - 1]["step"]) CHECK(log[i]["images_seen"] > log[i - 1]["images_seen"]);
  }

  TrainSchedule other = s;
  other.lambda = 1;
  TrainOptions bad = cont;
  bad.out_dir = dir / "bad";
  CHECK_THROWS_AS(train(manifest, other, bad), InvalidArgument);
}

TEST_CASE("a non-finite loss saves an emergency checkpoint and aborts") {
  TempDir dir("nan");
  const auto manifest = procedural_manifest(dir, 8, 4);
  TrainOptions opts;
  opts.out_dir = dir / "run";
  opts.before_step = [](Generator&, Discriminator& d) {
    Var w = d.parameter("d.b1.fc.b");
    w.mutable_value()[0] = std::nan("");
  };
  try {
    train(manifest, tiny_schedule(1, 16), opts);
    FAIL("expected an abort");
  } catch (const TrainingAborted& e) {
    CHECK(fs::exists(e.checkpoint()));
    CHECK(std::string(e.what()).find("non-finite") != std::string::npos);
  }
  imaging::DatasetManifest empty = manifest;
  empty.entries.clear();
  CHECK_THROWS_AS(train(empty, tiny_schedule(1, 16), opts), InvalidArgument);
}

TEST_CASE("generation is deterministic and matches the generator") {
  TempDir dir("generate");
  std::mt19937_64 rng(9);
  Generator g(tiny_network(2), rng);
  Discriminator d(tiny_network(2), rng);
  g.grow(rng);
  d.grow(rng);
  g.set_alpha(0.25);
  const GanCheckpoint ck = make_checkpoint(g, d, "feedfacefeedface", 0);

  generate(ck, 4, 21, dir / "a");
  generate(ck, 4, 21, dir / "b", {3, false, "gen"});
  for (int i = 0; i < 4; ++i) {
    const std::string name = fmt::format("gen_{:05d}.png", i);
    CHECK(file_bytes(dir / "a" / name) == file_bytes(dir / "b" / name));
  }
  generate(ck, 4, 22, dir / "c");
  CHECK(file_bytes(dir / "a" / "gen_00000.png") != file_bytes(dir / "c" / "gen_00000.png"));

  // One fixed latent: the PNG holds the alpha = 1 forward pass after export mapping.
  const Tensor z = sample_latents(ck, 1, 5);
  const auto recs = generate_from_latents(ck, z, dir / "one");
  const Tensor direct = g.sample(z, 2, 1.0);
  const Tensor png = imaging::load_image(recs[0].path, 1).pixels;
  for (std::size_t k = 0; k < png.size(); ++k) CHECK(png[k] == imaging::to_byte(direct[k]) / 127.5 - 1.0);
  CHECK_THROWS_AS(generate(ck, 0, 1, dir / "none"), InvalidArgument);
}
