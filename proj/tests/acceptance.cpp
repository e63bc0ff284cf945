// Acceptance run: one PASS/FAIL line per criterion. Exit status is the
// number of failed criteria.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <numeric>
#include <random>
#include <sstream>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "detection_oracle.hpp"
#include "dropsynth/checkpoint.hpp"
#include "dropsynth/detection.hpp"
#include "dropsynth/experiment.hpp"
#include "dropsynth/fid.hpp"
#include "dropsynth/imaging.hpp"
#include "dropsynth/procedural.hpp"
#include "dropsynth/training.hpp"
#include "test_util.hpp"

namespace fs = std::filesystem;
using namespace dropsynth;
using Clock = std::chrono::steady_clock;

namespace {

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Collects failed checks of one criterion.
struct Criterion {
  std::vector<std::string> failures;
  std::vector<std::string> notes;

  void check(bool ok, const std::string& what) {
    if (!ok) failures.push_back(what);
  }
  void note(const std::string& s) { notes.push_back(s); }
};

int g_failed = 0;

void run(int number, const std::string& title, const std::function<void(Criterion&)>& body) {
  Criterion c;
  const auto t0 = Clock::now();
  try {
    body(c);
  } catch (const std::exception& e) {
    c.failures.push_back(fmt::format("exception: {}", e.what()));
  }
  const bool ok = c.failures.empty();
  g_failed += !ok;
  std::string detail;
  for (const auto& n : c.notes) detail += (detail.empty() ? "" : "; ") + n;
  for (const auto& f : c.failures) detail += (detail.empty() ? "" : "; ") + ("FAILED " + f);
  fmt::print("[{}] {}. {} ({:.1f}s){}{}\n", ok ? "PASS" : "FAIL", number, title, seconds_since(t0),
             detail.empty() ? "" : ": ", detail);
  std::fflush(stdout);
}

// ---------------------------------------------------------------------------

void shape_law(Criterion& c) {
  const auto t0 = Clock::now();
  gan::NetworkConfig cfg;  // full-size widths, max stage 9
  std::mt19937_64 rng(1);
  gan::Generator g(cfg, rng);
  while (g.active_stage() < 9) g.grow(rng);
  const Tensor z = g.sample_latents(1, rng);
  std::vector<std::size_t> sides;
  for (int stage = 1; stage <= 9; ++stage) {
    const Tensor out = g.sample(z, stage, 1.0);
    const std::size_t r = std::size_t{1} << (stage + 1);
    c.check(out.shape() == Shape{1, 1, r, r}, fmt::format("stage {} shape", stage));
    c.check(out.all_finite(), fmt::format("stage {} finite", stage));
    sides.push_back(out.dim(2));
  }
  const double secs = seconds_since(t0);
  c.check(sides == std::vector<std::size_t>{4, 8, 16, 32, 64, 128, 256, 512, 1024}, "side sequence");
  c.check(secs < 60, fmt::format("runtime {:.1f}s >= 60s", secs));
  c.note(fmt::format("sides {} in {:.1f}s", fmt::join(sides, ","), secs));
}

gan::Critic linear_critic(const Tensor& w) {
  return [w](const nn::Var& x) {
    const std::size_t n = x.shape()[0];
    return nn::reshape(nn::matmul(nn::reshape(x, {n, w.size()}), nn::Var(w.reshaped({w.size(), 1}))), {n});
  };
}

// sum softplus(x W) + 0.1 |x|^2 per sample.
gan::Critic smooth_critic(const nn::Var& w) {
  return [w](const nn::Var& x) {
    const std::size_t n = x.shape()[0], k = w.shape()[0];
    const nn::Var flat = nn::reshape(x, {n, k});
    const nn::Var h = nn::softplus(nn::matmul(flat, w));
    const nn::Var s = nn::add(nn::sum_to(h, {n, 1}), nn::scale(nn::sum_to(nn::mul(flat, flat), {n, 1}), 0.1));
    return nn::reshape(s, {n});
  };
}

void penalty_analytics(Criterion& c) {
  std::mt19937_64 rng(3);
  const Tensor real = Tensor::uniform({6, 4}, rng, -1, 1), fake = Tensor::uniform({6, 4}, rng, -1, 1);

  const Tensor unit({4}, std::vector<Scalar>{0.5, -0.5, 0.5, -0.5});
  const double p0 = gan::gradient_penalty(linear_critic(unit), real, fake, 10, rng).penalty.item();
  c.check(p0 == 0.0, fmt::format("unit-norm critic penalty {} != 0", p0));

  const Tensor three({4}, std::vector<Scalar>{3, 0, 0, 0});
  const double p3 = gan::gradient_penalty(linear_critic(three), real, fake, 10, rng).penalty.item();
  c.check(std::abs(p3 - 40.0) <= 1e-4, fmt::format("3*x1 critic penalty {}", p3));

  // Smooth critic: input gradients and the penalty's weight gradient
  // against central differences.
  const Tensor w0 = Tensor::uniform({6, 3}, rng, -1, 1);
  const Tensor xhat = Tensor::uniform({4, 6}, rng, -1, 1);
  double worst = 0;
  {
    const gan::PenaltyResult r = gan::gradient_penalty_at(smooth_critic(nn::Var(w0)), xhat, 10);
    for (std::size_t n = 0; n < 4; ++n) {
      const Tensor row({1, 6}, std::vector<Scalar>(xhat.data() + n * 6, xhat.data() + n * 6 + 6));
      const Tensor fd = testing::numeric_gradient(
          [&](const Tensor& t) { return smooth_critic(nn::Var(w0))(nn::Var(t)).value()[0]; }, row);
      const double fd_norm = std::sqrt(std::inner_product(fd.data(), fd.data() + 6, fd.data(), 0.0));
      worst = std::max(worst, std::abs(r.gradient_norms[n] - fd_norm) / fd_norm);
    }
  }
  const nn::Var w(w0, true);
  const gan::PenaltyResult r = gan::gradient_penalty_at(smooth_critic(w), xhat, 10, true);
  const nn::Var dw = nn::grad(r.penalty, std::vector<nn::Var>{w}).at(0);
  const Tensor fd = testing::numeric_gradient(
      [&](const Tensor& t) { return gan::gradient_penalty_at(smooth_critic(nn::Var(t, true)), xhat, 10).penalty.item(); },
      w0);
  worst = std::max(worst, testing::relative_error(dw.value(), fd));
  c.check(worst < 1e-3, fmt::format("finite-difference relative error {:.2e}", worst));
  c.note(fmt::format("penalties {} and {:.6f}, fd error {:.1e}", p0, p3, worst));
}

Eigen::MatrixXd random_psd(Eigen::Index d, std::mt19937_64& rng) {
  std::normal_distribution<double> n01;
  Eigen::MatrixXd b(d, d);
  for (Eigen::Index i = 0; i < b.size(); ++i) b.data()[i] = n01(rng);
  return b * b.transpose();
}

fid::FeatureSet draws(Eigen::Index n, const Eigen::MatrixXd& mix, std::mt19937_64& rng) {
  std::normal_distribution<double> n01;
  fid::FeatureSet f;
  f.extractor_id = "gaussian";
  f.features.resize(n, mix.rows());
  for (Eigen::Index i = 0; i < f.features.size(); ++i) f.features.data()[i] = n01(rng);
  f.features = f.features * mix.transpose();
  return f;
}

void fid_analytics(Criterion& c) {
  std::mt19937_64 rng(4);
  const Eigen::MatrixXd mix = random_psd(8, rng) / 8.0 + Eigen::MatrixXd::Identity(8, 8);
  const fid::FeatureSet x = draws(500, mix, rng);
  const double self = fid::compute_fid(x, x).fid;
  c.check(self == 0.0, fmt::format("fid(X,X) = {}", self));

  auto gauss = [](Eigen::VectorXd mu, Eigen::MatrixXd s) { return fid::GaussianStats{std::move(mu), std::move(s)}; };
  const double uni = fid::frechet_distance(gauss(Eigen::VectorXd::Zero(1), Eigen::MatrixXd::Identity(1, 1)),
                                           gauss(Eigen::VectorXd::Ones(1), Eigen::MatrixXd::Identity(1, 1)));
  c.check(std::abs(uni - 1.0) <= 1e-9, fmt::format("univariate {}", uni));
  const double comm = fid::frechet_distance(gauss(Eigen::VectorXd::Zero(2), Eigen::MatrixXd::Identity(2, 2)),
                                            gauss(Eigen::VectorXd::Zero(2), 4 * Eigen::MatrixXd::Identity(2, 2)));
  c.check(std::abs(comm - 2.0) <= 1e-9, fmt::format("I vs 4I {}", comm));

  const double same = fid::compute_fid(draws(10000, mix, rng), draws(10000, mix, rng)).fid;
  c.check(same < 0.05, fmt::format("two 8-D samples {}", same));

  double worst = 0;
  for (Eigen::Index d : {8, 64}) {
    const Eigen::MatrixXd a = random_psd(d, rng);
    const Eigen::MatrixXd s = fid::sqrtm_psd(a);
    worst = std::max(worst, (s * s - a).norm() / a.norm());
  }
  c.check(worst < 1e-6, fmt::format("sqrtm reconstruction {:.2e}", worst));
  c.note(fmt::format("{} / {:.12f} / {:.12f} / {:.4f} / sqrtm {:.1e}", self, uni, comm, same, worst));
}

void detection_oracle(Criterion& c) {
  using namespace testing;
  std::mt19937_64 rng(2024);
  std::size_t mismatches = 0;
  for (int s = 0; s < 200; ++s) {
    const auto sc = random_scene(rng, "s");
    for (double t : {0.5, 0.75}) {
      const auto m = detect::match(sc.preds, sc.gts, t);
      mismatches += m.tp_count() != oracle_max_matching(sc.preds, sc.gts, t);
    }
  }
  c.check(mismatches == 0, fmt::format("{} greedy/oracle mismatches", mismatches));

  const detect::ScoredMatches walked{{0.9, 0.8, 0.7}, {true, false, true}, 2};
  const double ap = detect::average_precision(walked);
  c.check(std::abs(ap - 0.8333333333) <= 1e-6, fmt::format("hand-walked AP {}", ap));

  std::size_t violations = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    detect::GroundTruth gt;
    std::vector<detect::Detection> preds;
    for (int img = 0; img < 3; ++img) {
      const std::string id = "i" + std::to_string(img);
      auto sc = random_scene(rng, id);
      gt[id] = sc.gts;
      preds.insert(preds.end(), sc.preds.begin(), sc.preds.end());
    }
    std::size_t total = 0;
    for (auto& [id, b] : gt) total += b.size();
    if (total == 0) gt["i0"].push_back(random_box(rng));
    const auto r = detect::map_suite(preds, gt);
    violations += r.map50_95 > r.map50 + 1e-12;
  }
  c.check(violations == 0, fmt::format("{} scenes with mAP50-95 > mAP50", violations));

  detect::GroundTruth gt;
  std::vector<detect::Detection> perfect;
  std::uniform_real_distribution<double> u(0.1, 1.0);
  for (int img = 0; img < 20; ++img) {
    const std::string id = "p" + std::to_string(img);
    for (int k = 0; k < 1 + img % 4; ++k) {
      gt[id].push_back(box(0.24 * k, 0.1, 0.24 * k + 0.2, 0.3));
      perfect.push_back(det(id, gt[id].back(), u(rng)));
    }
  }
  for (auto interp : {detect::Interpolation::all_point, detect::Interpolation::coco_101}) {
    const auto r = detect::map_suite(perfect, gt, interp);
    c.check(r.map50 == 1.0 && r.map50_95 == 1.0 && r.precision == 1.0 && r.recall == 1.0 && r.f1 == 1.0,
            fmt::format("perfect detector ({}) {} {} {} {}", detect::to_string(interp), r.map50, r.map50_95,
                        r.precision, r.recall));
  }
  c.note(fmt::format("AP {:.7f}", ap));
}

experiment::RungResult published_row(std::size_t size, experiment::RungMetrics val, experiment::RungMetrics test) {
  experiment::RungResult r;
  r.train_size = size;
  r.real = 469;
  r.synthetic = size - 469;
  r.val = val;
  r.test = test;
  return r;
}

void published_arithmetic(Criterion& c) {
  experiment::ExperimentReport rep;
  rep.backend = "published";
  rep.rungs = {published_row(469, {0.920, 0.898, 0.954, 0.635}, {0.891, 0.877, 0.950, 0.636}),
               published_row(969, {0.955, 0.89, 0.96, 0.685}, {0.956, 0.888, 0.970, 0.683}),
               published_row(1469, {0.964, 0.916, 0.974, 0.698}, {0.948, 0.929, 0.977, 0.704}),
               published_row(1783, {0.938, 0.932, 0.966, 0.717}, {0.938, 0.927, 0.973, 0.703}),
               published_row(2504, {0.969, 0.962, 0.988, 0.737}, {0.951, 0.970, 0.988, 0.721})};
  using experiment::Metric;
  using imaging::Split;
  const double full = 100 * rep.improvement(4, Split::val, Metric::map50_95);
  const double first = 100 * rep.improvement(1, Split::val, Metric::map50_95);
  c.check(std::abs(full - 16.06) <= 0.01, fmt::format("0.635 -> 0.737 gives {:.4f}%", full));
  c.check(std::abs(first - 7.87) <= 0.01, fmt::format("0.635 -> 0.685 gives {:.4f}%", first));
  const std::string table = rep.render_table();
  c.check(table.find("+16.06%") != std::string::npos && table.find("+7.87%") != std::string::npos,
          "rendered table lacks the improvements");
  c.note(fmt::format("+{:.4f}% and +{:.4f}%", full, first));
}

// ---------------------------------------------------------------------------
// Criteria 6-8 share one trained generator.

struct SmokeRun {
  fs::path final_checkpoint;
};

void end_to_end(Criterion& c, const fs::path& dir, SmokeRun& out) {
  procedural::SceneOptions scene;
  scene.resolution = 16;
  procedural::write_corpus(dir / "raw", 200, scene, 77);
  const auto manifest = imaging::prepare_dataset(dir / "raw", dir / "data", {16, {1.0, 0.0, 0.0}, 1, 1});
  c.check(manifest.count(imaging::Split::train) == 200, "200 training scenes");

  const auto schedule = gan::TrainSchedule::desk_scale(3, 250, 16000);
  gan::TrainOptions opt;
  opt.out_dir = dir / "gan";
  opt.seed = 1;
  const auto t0 = Clock::now();
  const auto result = gan::train(manifest, schedule, opt);
  const double secs = seconds_since(t0);
  c.check(result.completed, "training did not complete");
  c.check(secs < 15 * 60, fmt::format("training took {:.0f}s", secs));
  out.final_checkpoint = result.final_checkpoint;

  const auto trained = gan::GanCheckpoint::load(result.final_checkpoint);
  c.check(trained.stage == 3, fmt::format("final stage {}", trained.stage));

  std::mt19937_64 held_rng(999);
  std::vector<Tensor> held;
  for (int i = 0; i < 256; ++i) held.push_back(procedural::render_scene(scene, held_rng).pixels);
  const fid::TinyEmbedder embedder;
  const auto ref = fid::extract_features(held, embedder);

  auto fid_of = [&](const gan::GanCheckpoint& ck, const fs::path& where) {
    std::vector<Tensor> imgs;
    for (const auto& r : gan::generate(ck, 256, 5, where)) imgs.push_back(r.pixels);
    return fid::compute_fid(ref, fid::extract_features(imgs, embedder)).fid;
  };
  const double fid_trained = fid_of(trained, dir / "gen_trained");

  // Same architecture, never trained, exported the same way.
  std::mt19937_64 rng(12345);
  gan::Generator g(schedule.network, rng);
  gan::Discriminator d(schedule.network, rng);
  while (g.active_stage() < 3) {
    g.grow(rng);
    d.grow(rng);
  }
  g.set_alpha(1);
  d.set_alpha(1);
  const double fid_untrained = fid_of(gan::make_checkpoint(g, d, schedule.hash(), 0), dir / "gen_untrained");

  const double drop = 1 - fid_trained / fid_untrained;
  c.check(drop >= 0.5, fmt::format("FID drop {:.1f}% < 50%", 100 * drop));
  c.note(fmt::format("trained in {:.0f}s ({} steps); tiny FID {:.3f} vs untrained {:.3f}, {:.1f}% lower", secs,
                     result.steps, fid_trained, fid_untrained, 100 * drop));
}

void augmentation_direction(Criterion& c, const fs::path& dir, const SmokeRun& smoke) {
  if (smoke.final_checkpoint.empty()) throw Error("no generator checkpoint from the end-to-end run");
  const std::array<double, 3> ratios{0.653, 0.174, 0.173};
  std::size_t total = 100;
  while (imaging::split_counts(total, ratios)[0] < 100) ++total;

  procedural::SceneOptions scene;
  scene.resolution = 16;
  procedural::write_corpus(dir / "raw", total, scene, 31);
  imaging::PrepareOptions popt;
  popt.target_resolution = 16;
  popt.split_ratios = ratios;
  popt.seed = 31;
  const auto real = imaging::prepare_dataset(dir / "raw", dir / "real", popt);
  c.check(real.count(imaging::Split::train) == 100, "100 real training scenes");

  // 400 generated scenes, pseudo-labeled by a detector trained on the real set.
  const auto ck = gan::GanCheckpoint::load(smoke.final_checkpoint);
  std::vector<fs::path> images;
  for (const auto& r : gan::generate(ck, 400, 77, dir / "generated", {8, false, "gen"})) images.push_back(r.path);
  const auto synthetic = experiment::synthetic_manifest(images, ck.id(), 16);

  experiment::StubDetector stub;
  const fs::path model = stub.train(dir / "real/manifest.json", {}, dir / "pretrain");
  experiment::PseudoLabelOptions plo;
  plo.label_dir = dir / "pseudo_labels";
  const auto labeled = experiment::pseudo_label(stub, model, synthetic, plo, dir / "pseudo_work");

  auto ladder = [&](const std::string& name) {
    experiment::LadderOptions lo;
    lo.rungs = {100, 500};
    lo.seed = 469;
    lo.work_dir = dir / name;
    const auto rep = experiment::run_ladder(stub, real, labeled.manifest, lo);
    rep.save(dir / name / "report.json");
    return rep;
  };
  const auto a = ladder("ladder_a");
  const auto b = ladder("ladder_b");

  c.check(a.rungs.size() == 2 && a.complete(), "ladder incomplete");
  c.check(a.hygiene.ok(), fmt::format("hygiene: {}", a.hygiene.to_json().dump()));
  c.check(slurp(dir / "ladder_a/report.json") == slurp(dir / "ladder_b/report.json"), "reports differ between runs");
  if (a.complete()) {
    c.check(a.rungs[1].synthetic == 400, "second rung holds 400 synthetic scenes");
    const double dv = a.rungs[1].val->map50 - a.rungs[0].val->map50;
    const double dt = a.rungs[1].test->map50 - a.rungs[0].test->map50;
    c.note(fmt::format("{} boxes on 400 generated images ({} flagged); mAP50 val {:.3f} -> {:.3f} ({:+.3f}), "
                       "test {:.3f} -> {:.3f} ({:+.3f}); hygiene ok, reports byte-identical",
                       std::accumulate(labeled.box_counts.begin(), labeled.box_counts.end(), std::size_t{0}),
                       labeled.flagged, a.rungs[0].val->map50, a.rungs[1].val->map50, dv, a.rungs[0].test->map50,
                       a.rungs[1].test->map50, dt));
  }
}

void checkpoint_round_trip(Criterion& c, const fs::path& dir, const SmokeRun& smoke) {
  auto compare = [&](const gan::GanCheckpoint& before, const std::string& tag) {
    const auto pre = gan::generate(before, 12, 2024, dir / (tag + "_pre"));
    before.save(dir / (tag + ".ckpt"));
    const auto after = gan::GanCheckpoint::load(dir / (tag + ".ckpt"));
    const auto post = gan::generate(after, 12, 2024, dir / (tag + "_post"));
    std::size_t differ = 0;
    for (std::size_t i = 0; i < pre.size(); ++i) {
      differ += slurp(pre[i].path) != slurp(post[i].path);
      differ += !(pre[i].pixels == post[i].pixels);
    }
    c.check(pre.size() == 12 && post.size() == 12, tag + ": image count");
    c.check(differ == 0, fmt::format("{}: {} differing outputs", tag, differ));
    after.save(dir / (tag + "_again.ckpt"));
    c.check(slurp(dir / (tag + ".ckpt")) == slurp(dir / (tag + "_again.ckpt")), tag + ": re-saved bytes differ");
  };

  // Mid-fade networks with fresh weights.
  gan::NetworkConfig cfg;
  cfg.latent_dim = 16;
  cfg.channels = {16, 16, 8, 8, 4, 4, 4, 4, 4};
  cfg.max_stage = 4;
  std::mt19937_64 rng(8);
  gan::Generator g(cfg, rng);
  gan::Discriminator d(cfg, rng);
  g.grow(rng);
  d.grow(rng);
  g.set_alpha(0.37);
  d.set_alpha(0.37);
  compare(gan::make_checkpoint(g, d, "feedfacefeedface", 4242), "fresh");
  if (!smoke.final_checkpoint.empty()) compare(gan::GanCheckpoint::load(smoke.final_checkpoint), "trained");
  c.note(smoke.final_checkpoint.empty() ? "fresh networks only" : "fresh and trained checkpoints");
}

}  // namespace

int main() {
  spdlog::set_level(spdlog::level::warn);
  testing::TempDir work("acceptance");
  SmokeRun smoke;

  run(1, "shape law, stage 9 generator at batch 1", shape_law);
  run(2, "gradient penalty analytics", penalty_analytics);
  run(3, "FID analytics", fid_analytics);
  run(4, "detection metrics against the oracle", detection_oracle);
  run(5, "published ladder arithmetic", published_arithmetic);
  run(6, "end-to-end GAN smoke run, stages 1-3 on 200 scenes",
      [&](Criterion& c) { end_to_end(c, work / "e2e", smoke); });
  run(7, "augmentation ladder with the stub detector",
      [&](Criterion& c) { augmentation_direction(c, work / "ladder", smoke); });
  run(8, "checkpoint round trip", [&](Criterion& c) { checkpoint_round_trip(c, work / "ckpt", smoke); });

  fmt::print("{} of 8 criteria passed\n", 8 - g_failed);
  return g_failed;
}
