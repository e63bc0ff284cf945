#include "dropsynth/training.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <mutex>
#include <numeric>
#include <sstream>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "dropsynth/kernels.hpp"

namespace dropsynth::gan {

using nn::Var;
namespace fs = std::filesystem;

std::string to_string(LossMode mode) { return mode == LossMode::standard ? "standard" : "wasserstein"; }

LossMode parse_loss_mode(const std::string& text) {
  if (text == "standard") return LossMode::standard;
  if (text == "wasserstein") return LossMode::wasserstein;
  throw InvalidArgument(fmt::format("unknown loss mode '{}' (expected standard or wasserstein)", text));
}

namespace {

void check_scores(const Var& s, const char* side) {
  if (!s.defined() || s.value().size() == 0) throw InvalidArgument(fmt::format("{} scores are empty", side));
  for (std::size_t i = 0; i < s.value().size(); ++i) {
    if (std::isnan(s.value()[i])) throw InvalidArgument(fmt::format("{} scores contain NaN (index {})", side, i));
  }
}

bool finite(const Var& v) { return v.value().all_finite(); }

}  // namespace

Losses minimax_losses(const Var& d_real, const Var& d_fake, LossMode mode) {
  check_scores(d_real, "d_real");
  check_scores(d_fake, "d_fake");
  if (d_real.value().size() != d_fake.value().size()) {
    throw InvalidArgument(fmt::format("score batches differ in length ({} real, {} fake)", d_real.value().size(),
                                      d_fake.value().size()));
  }
  if (mode == LossMode::wasserstein) {
    return {nn::neg(nn::mean(d_fake)), nn::sub(nn::mean(d_fake), nn::mean(d_real))};
  }
  // -log sigmoid(r) = softplus(-r); -log(1 - sigmoid(f)) = softplus(f).
  return {nn::mean(nn::softplus(nn::neg(d_fake))),
          nn::add(nn::mean(nn::softplus(nn::neg(d_real))), nn::mean(nn::softplus(d_fake)))};
}

Tensor interpolate(const Tensor& real, const Tensor& fake, const Tensor& epsilon) {
  if (real.shape() != fake.shape()) {
    throw InvalidArgument(fmt::format("real {} and fake {} batches differ in shape", shape_string(real.shape()),
                                      shape_string(fake.shape())));
  }
  const std::size_t n = real.dim(0), per = real.size() / n;
  if (epsilon.size() != n) throw InvalidArgument("need one interpolation weight per pair");
  Tensor out(real.shape());
  for (std::size_t i = 0; i < n; ++i) {
    const Scalar e = epsilon[i];
    for (std::size_t k = i * per; k < (i + 1) * per; ++k) {
      const Scalar a = real[k], b = fake[k];
      out[k] = std::clamp(b + e * (a - b), std::min(a, b), std::max(a, b));
    }
  }
  return out;
}

PenaltyResult gradient_penalty_at(const Critic& critic, const Tensor& interpolates, Scalar lambda, bool create_graph) {
  if (!(lambda >= 0)) throw InvalidArgument(fmt::format("penalty weight must be >= 0, got {}", lambda));
  if (interpolates.rank() < 1 || interpolates.dim(0) == 0) throw InvalidArgument("empty interpolate batch");
  nn::GradModeGuard on(true);
  const std::size_t n = interpolates.dim(0), per = interpolates.size() / n;
  const Var x(interpolates, true);
  const Var g = nn::grad(nn::sum(critic(x)), std::span<const Var>(&x, 1), create_graph)[0];
  const Var flat = nn::reshape(g, {n, per});
  const Var sq = nn::sum_to(nn::mul(flat, flat), {n, 1});
  // sqrt has an infinite slope at 0; nudge exact zeros so the backward pass
  // stays finite (the nudged entries carry zero gradient anyway).
  Tensor guard({n, 1});
  for (std::size_t i = 0; i < n; ++i) guard[i] = sq.value()[i] == 0 ? 1e-30 : 0;
  const Var norm = nn::pow(nn::add(sq, nn::constant(guard)), 0.5);

  PenaltyResult r;
  r.interpolates = interpolates;
  r.gradient_norms = norm.value().reshaped({n});
  r.penalty = lambda == 0 ? nn::constant(Tensor({1}))
                          : nn::scale(nn::mean(nn::pow(nn::add_scalar(norm, -1), 2)), lambda);
  return r;
}

PenaltyResult gradient_penalty(const Critic& critic, const Tensor& real, const Tensor& fake, Scalar lambda,
                               std::mt19937_64& rng, bool create_graph) {
  if (!(lambda >= 0)) throw InvalidArgument(fmt::format("penalty weight must be >= 0, got {}", lambda));
  if (real.rank() < 1 || real.dim(0) == 0) throw InvalidArgument("empty batch");
  const Tensor eps = Tensor::uniform({real.dim(0)}, rng, 0, 1);
  PenaltyResult r = gradient_penalty_at(critic, interpolate(real, fake, eps), lambda, create_graph);
  r.epsilon = eps;
  return r;
}

// ---------------------------------------------------------------------------

nlohmann::json AdamConfig::to_json() const {
  return {{"lr", lr}, {"beta1", beta1}, {"beta2", beta2}, {"eps", eps}};
}

AdamConfig AdamConfig::from_json(const nlohmann::json& doc) {
  AdamConfig c;
  c.lr = doc.value("lr", c.lr);
  c.beta1 = doc.value("beta1", c.beta1);
  c.beta2 = doc.value("beta2", c.beta2);
  c.eps = doc.value("eps", c.eps);
  return c;
}

void Adam::step(const ParameterMap& params, const std::vector<Var>& grads) {
  if (grads.size() != params.size()) throw InvalidArgument("one gradient per parameter expected");
  std::size_t i = 0;
  for (const auto& [name, p] : params) {
    const Tensor& g = grads[i++].value();
    Var leaf = p;
    Tensor& w = leaf.mutable_value();
    Slot& s = slots_[name];
    if (s.m.shape() != w.shape()) s = Slot{Tensor(w.shape()), Tensor(w.shape()), 0};
    ++s.t;
    const Scalar c1 = 1 - std::pow(config_.beta1, static_cast<Scalar>(s.t));
    const Scalar c2 = 1 - std::pow(config_.beta2, static_cast<Scalar>(s.t));
    const Scalar b1 = config_.beta1, b2 = config_.beta2, lr = config_.lr, eps = config_.eps;
    Scalar* m = s.m.data();
    Scalar* v = s.v.data();
    Scalar* wd = w.data();
    const Scalar* gd = g.data();
    const std::size_t size = w.size();
#pragma omp parallel for schedule(static) if (size > 65536)
    for (std::size_t k = 0; k < size; ++k) {
      m[k] = b1 * m[k] + (1 - b1) * gd[k];
      v[k] = b2 * v[k] + (1 - b2) * gd[k] * gd[k];
      wd[k] -= lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + eps);
    }
  }
}

void Adam::save_state(const std::string& tag, TensorMap& tensors, nlohmann::json& meta) const {
  nlohmann::json steps = nlohmann::json::object();
  for (const auto& [name, s] : slots_) {
    tensors.insert_or_assign(fmt::format("opt.{}.m.{}", tag, name), s.m);
    tensors.insert_or_assign(fmt::format("opt.{}.v.{}", tag, name), s.v);
    steps[name] = s.t;
  }
  meta[tag] = {{"config", config_.to_json()}, {"steps", steps}};
}

void Adam::load_state(const std::string& tag, const TensorMap& tensors, const nlohmann::json& meta) {
  slots_.clear();
  if (!meta.contains(tag)) return;
  for (const auto& [name, t] : meta.at(tag).at("steps").items()) {
    Slot s;
    s.m = tensors.at(fmt::format("opt.{}.m.{}", tag, name));
    s.v = tensors.at(fmt::format("opt.{}.v.{}", tag, name));
    s.t = t.get<std::uint64_t>();
    slots_.emplace(name, std::move(s));
  }
}

// ---------------------------------------------------------------------------

void TrainSchedule::validate() const {
  network.validate();
  if (max_stage < 1 || max_stage > network.max_stage) {
    throw InvalidArgument(fmt::format("schedule max_stage {} must be in [1, {}]", max_stage, network.max_stage));
  }
  if (stages.size() < static_cast<std::size_t>(max_stage)) {
    throw InvalidArgument(fmt::format("schedule lists {} stages but trains to stage {}", stages.size(), max_stage));
  }
  for (int i = 1; i <= max_stage; ++i) {
    const auto& s = stages[static_cast<std::size_t>(i - 1)];
    if (s.batch_size == 0 || s.stabilize_images == 0 || (i > 1 && s.fade_images == 0)) {
      throw InvalidArgument(fmt::format("stage {}: batch size and phase lengths must be positive", i));
    }
  }
  if (!(lambda >= 0)) throw InvalidArgument("lambda must be >= 0");
  if (n_critic < 1) throw InvalidArgument("n_critic must be >= 1");
  if (!(drift >= 0)) throw InvalidArgument("drift must be >= 0");
  for (const auto* o : {&g_optimizer, &d_optimizer}) {
    if (!(o->lr > 0) || !(o->beta1 >= 0 && o->beta1 < 1) || !(o->beta2 >= 0 && o->beta2 < 1) || !(o->eps > 0)) {
      throw InvalidArgument("invalid optimizer settings");
    }
  }
}

nlohmann::json TrainSchedule::to_json() const {
  nlohmann::json st = nlohmann::json::array();
  for (const auto& s : stages) {
    st.push_back({{"fade_images", s.fade_images}, {"stabilize_images", s.stabilize_images},
                  {"batch_size", s.batch_size}});
  }
  return {{"network", network.to_json()},
          {"max_stage", max_stage},
          {"stages", st},
          {"g_optimizer", g_optimizer.to_json()},
          {"d_optimizer", d_optimizer.to_json()},
          {"lambda", lambda},
          {"n_critic", n_critic},
          {"mode", to_string(mode)},
          {"drift", drift},
          {"checkpoint_interval", checkpoint_interval}};
}

TrainSchedule TrainSchedule::from_json(const nlohmann::json& doc) {
  TrainSchedule s;
  try {
    if (doc.contains("network")) s.network = NetworkConfig::from_json(doc.at("network"));
    s.max_stage = doc.value("max_stage", s.network.max_stage);
    for (const auto& st : doc.at("stages")) {
      StageSchedule x;
      x.fade_images = st.value("fade_images", x.fade_images);
      x.stabilize_images = st.at("stabilize_images").get<std::uint64_t>();
      x.batch_size = st.value("batch_size", x.batch_size);
      s.stages.push_back(x);
    }
    if (doc.contains("g_optimizer")) s.g_optimizer = AdamConfig::from_json(doc.at("g_optimizer"));
    if (doc.contains("d_optimizer")) s.d_optimizer = AdamConfig::from_json(doc.at("d_optimizer"));
    s.lambda = doc.value("lambda", s.lambda);
    s.n_critic = doc.value("n_critic", s.n_critic);
    s.mode = parse_loss_mode(doc.value("mode", to_string(s.mode)));
    s.drift = doc.value("drift", s.drift);
    s.checkpoint_interval = doc.value("checkpoint_interval", s.checkpoint_interval);
  } catch (const nlohmann::json::exception& e) {
    throw InvalidArgument(fmt::format("bad training config: {}", e.what()));
  }
  s.validate();
  return s;
}

TrainSchedule TrainSchedule::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError(fmt::format("cannot open training config {}", path.string()));
  try {
    return from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::parse_error& e) {
    throw IoError(fmt::format("{}: {}", path.string(), e.what()));
  }
}

void TrainSchedule::save(const fs::path& path) const {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  out << to_json().dump(2) << "\n";
  if (!out) throw IoError(fmt::format("cannot write {}", path.string()));
}

std::string TrainSchedule::hash() const { return fnv1a_hex(to_json().dump()); }

TrainSchedule TrainSchedule::paper_scale() {
  TrainSchedule s;
  s.max_stage = 9;
  const std::size_t batch[9] = {16, 16, 16, 16, 16, 16, 8, 4, 4};
  for (std::size_t b : batch) s.stages.push_back({800000, 800000, b});
  return s;
}

TrainSchedule TrainSchedule::desk_scale(int max_stage, std::uint64_t images_per_phase,
                                        std::uint64_t final_images) {
  TrainSchedule s;
  s.network.latent_dim = 64;
  s.network.channels = {32, 32, 32, 32, 16, 16, 8, 8, 8};
  s.network.max_stage = std::max(max_stage, 1);
  s.max_stage = max_stage;
  for (int i = 0; i < max_stage; ++i) s.stages.push_back({images_per_phase, images_per_phase, 16});
  // Long low-res phases collapse the generator on a single mode it never
  // leaves; short early stages and a long last one avoid that.
  if (final_images > 0 && !s.stages.empty()) s.stages.back().stabilize_images = final_images;
  return s;
}

nlohmann::json StepRecord::to_json() const {
  return {{"step", step},         {"stage", stage},       {"phase", phase},
          {"alpha", alpha},       {"images_seen", images_seen}, {"d_loss", d_loss},
          {"g_loss", g_loss},     {"penalty", penalty},   {"grad_norm_mean", grad_norm_mean},
          {"seconds", seconds}};
}

Tensor fade_real_batch(const Tensor& batch, Scalar alpha) {
  if (alpha >= 1) return batch;
  const Tensor up = kernels::upsample_nearest2x(kernels::avg_pool2d(batch, 2, 2, 0, true));
  Tensor out(batch.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = alpha * batch[i] + (1 - alpha) * up[i];
  return out;
}

// ---------------------------------------------------------------------------
// Training loop.

namespace {

// Training images held as bytes at the top resolution.
class ImageBank {
 public:
  ImageBank(const std::vector<imaging::ManifestEntry>& entries, std::size_t channels, std::size_t resolution)
      : channels_(channels), resolution_(resolution) {
    const std::size_t per = channels * resolution * resolution;
    bytes_.reserve(entries.size() * per);
    for (const auto& e : entries) {
      Tensor px = imaging::load_image(e.image, channels).pixels;
      if (px.dim(1) != resolution || px.dim(2) != resolution) px = imaging::crop_and_resize(px, resolution);
      for (std::size_t i = 0; i < px.size(); ++i) bytes_.push_back(imaging::to_byte(px[i]));
    }
    count_ = entries.size();
  }

  std::size_t size() const { return count_; }

  Tensor batch(const std::vector<std::size_t>& indices, std::size_t resolution) const {
    const std::size_t per = channels_ * resolution_ * resolution_;
    Tensor out({indices.size(), channels_, resolution_, resolution_});
    for (std::size_t n = 0; n < indices.size(); ++n) {
      const std::uint8_t* src = bytes_.data() + indices[n] * per;
      Scalar* dst = out.data() + n * per;
      for (std::size_t i = 0; i < per; ++i) dst[i] = src[i] / 127.5 - 1.0;
    }
    if (resolution == resolution_) return out;
    return kernels::area_resize(out, resolution, resolution);
  }

 private:
  std::size_t channels_, resolution_, count_ = 0;
  std::vector<std::uint8_t> bytes_;
};

std::string rng_state(const std::mt19937_64& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

void restore_rng(std::mt19937_64& rng, const std::string& text) {
  std::istringstream is(text);
  is >> rng;
  if (!is) throw IoError("corrupt rng state in checkpoint");
}

class Trainer {
 public:
  Trainer(const imaging::DatasetManifest& manifest, const TrainSchedule& schedule, const TrainOptions& options)
      : schedule_(schedule),
        options_(options),
        hash_(schedule.hash()),
        rng_(options.seed),
        bank_(manifest.split(imaging::Split::train), schedule.network.image_channels,
              imaging::ResolutionLadder::resolution_of(schedule.max_stage)),
        g_(schedule.network, rng_),
        d_(schedule.network, rng_),
        g_opt_(schedule.g_optimizer),
        d_opt_(schedule.d_optimizer) {
    order_.resize(bank_.size());
    std::iota(order_.begin(), order_.end(), 0);
    std::shuffle(order_.begin(), order_.end(), rng_);
    if (options.resume) restore(*options.resume);
    fs::create_directories(options.out_dir);
    log_.open(options.out_dir / "train_log.ndjson", std::ios::app);
    if (!log_) throw IoError(fmt::format("cannot open training log in {}", options.out_dir.string()));
  }

  TrainResult run() {
    const auto start = std::chrono::steady_clock::now();
    while (true) {
      if (phase_ == "done") {
        if (stage_ >= schedule_.max_stage) {
          result_.completed = true;
          break;
        }
        g_.grow(rng_);
        d_.grow(rng_);
        ++stage_;
        phase_ = "fade";
        phase_images_ = 0;
        spdlog::info("stage {} ({} px): fade-in", stage_, g_.resolution());
      }
      const StageSchedule& sched = schedule_.stages[static_cast<std::size_t>(stage_ - 1)];
      const std::uint64_t phase_len = phase_ == "fade" ? sched.fade_images : sched.stabilize_images;
      if (phase_images_ >= phase_len) {
        if (phase_ == "fade") {
          phase_ = "stabilize";
          phase_images_ = 0;
        } else {
          phase_ = "done";
          set_alpha(1.0);
          checkpoint(fmt::format("stage{}.ckpt", stage_), "stage");
        }
        continue;
      }
      if (options_.max_steps && step_ >= *options_.max_steps) break;

      const Scalar alpha =
          phase_ == "fade" ? std::min<Scalar>(1, static_cast<Scalar>(phase_images_) / static_cast<Scalar>(phase_len))
                           : 1.0;
      set_alpha(alpha);
      if (options_.before_step) options_.before_step(g_, d_);
      StepRecord rec = step(sched.batch_size, alpha);
      rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      {
        std::lock_guard<std::mutex> lock(log_mutex_);
        log_ << rec.to_json().dump() << "\n";
        log_.flush();
      }
      if (options_.on_step) options_.on_step(rec);
      if (schedule_.checkpoint_interval > 0) {
        const std::uint64_t slot = images_seen_ / schedule_.checkpoint_interval;
        if (slot > last_interval_) {
          last_interval_ = slot;
          checkpoint(fmt::format("images_{:010d}.ckpt", images_seen_), "interval");
        }
      }
    }
    result_.steps = step_;
    result_.images_seen = images_seen_;
    return result_;
  }

 private:
  void set_alpha(Scalar a) {
    g_.set_alpha(a);
    d_.set_alpha(a);
  }

  std::vector<std::size_t> next_indices(std::size_t count) {
    std::vector<std::size_t> out;
    out.reserve(count);
    while (out.size() < count) {
      if (cursor_ >= order_.size()) {
        // Data exhausted: reshuffle and keep going.
        std::shuffle(order_.begin(), order_.end(), rng_);
        cursor_ = 0;
      }
      out.push_back(order_[cursor_++]);
    }
    return out;
  }

  [[noreturn]] void abort(const std::string& what) {
    const fs::path path = checkpoint("emergency.ckpt", "emergency");
    const std::string msg = fmt::format("non-finite {} at step {} (stage {}, alpha {:.4f}, images seen {}); state saved to {}",
                                        what, step_, stage_, g_.alpha(), images_seen_, path.string());
    spdlog::error(msg);
    throw TrainingAborted(msg, path);
  }

  StepRecord step(std::size_t batch, Scalar alpha) {
    const std::size_t res = g_.resolution();
    nn::GradModeGuard on(true);
    StepRecord rec;
    for (int k = 0; k < schedule_.n_critic; ++k) {
      const Tensor real = fade_real_batch(bank_.batch(next_indices(batch), res), alpha);
      const Tensor fake = g_.sample(g_.sample_latents(batch, rng_), stage_, alpha);
      const Var d_real = d_.forward(Var(real));
      const Var d_fake = d_.forward(Var(fake));
      if (!finite(d_real) || !finite(d_fake)) abort("critic scores");
      const Losses losses = minimax_losses(d_real, d_fake, schedule_.mode);
      const Critic critic = [this](const Var& x) { return d_.forward(x); };
      const PenaltyResult pen = gradient_penalty(critic, real, fake, schedule_.lambda, rng_);
      Var total = nn::add(losses.d_loss_core, pen.penalty);
      if (schedule_.drift > 0) total = nn::add(total, nn::scale(nn::mean(nn::mul(d_real, d_real)), schedule_.drift));
      if (!finite(total)) abort("critic loss");
      const auto params = d_.parameter_list();
      d_opt_.step(d_.parameters(), nn::grad(total, params));
      images_seen_ += batch;
      phase_images_ += batch;
      rec.d_loss = total.item();
      rec.penalty = pen.penalty.item();
      rec.grad_norm_mean = pen.gradient_norms.sum() / static_cast<double>(batch);
    }
    const Var fake = g_.forward(Var(g_.sample_latents(batch, rng_)));
    const Var d_fake = d_.forward(fake);
    if (!finite(d_fake)) abort("critic scores on generated images");
    const Var g_loss = minimax_losses(d_fake.detach(), d_fake, schedule_.mode).g_loss;
    if (!finite(g_loss)) abort("generator loss");
    g_opt_.step(g_.parameters(), nn::grad(g_loss, g_.parameter_list()));

    rec.step = step_++;
    rec.stage = stage_;
    rec.phase = phase_;
    rec.alpha = alpha;
    rec.images_seen = images_seen_;
    rec.g_loss = g_loss.item();
    return rec;
  }

  fs::path checkpoint(const std::string& file, const std::string& reason) {
    GanCheckpoint ck = make_checkpoint(g_, d_, hash_, images_seen_);
    nlohmann::json opt = nlohmann::json::object();
    g_opt_.save_state("g", ck.tensors, opt);
    d_opt_.save_state("d", ck.tensors, opt);
    ck.trainer = {{"phase", phase_},   {"phase_images", phase_images_}, {"step", step_},
                  {"rng", rng_state(rng_)}, {"order", order_},          {"cursor", cursor_},
                  {"last_interval", last_interval_}, {"optimizer", opt}, {"seed", options_.seed},
                  {"schedule", schedule_.to_json()}};
    const fs::path path = options_.out_dir / file;
    ck.save(path);
    const CheckpointEvent ev{path, stage_, g_.alpha(), images_seen_, reason};
    result_.checkpoints.push_back(ev);
    if (reason != "emergency") result_.final_checkpoint = path;
    if (options_.on_checkpoint) options_.on_checkpoint(ev);
    spdlog::info("checkpoint {} (stage {}, {} images)", path.string(), stage_, images_seen_);
    return path;
  }

  void restore(const fs::path& path) {
    const GanCheckpoint ck = GanCheckpoint::load(path);
    if (ck.config_hash != hash_) {
      throw InvalidArgument(fmt::format("{} was written by a run with a different training config (hash {} vs {})",
                                        path.string(), ck.config_hash, hash_));
    }
    if (ck.stage > schedule_.max_stage) throw InvalidArgument("checkpoint is beyond the schedule's last stage");
    g_ = ck.generator();
    d_ = ck.discriminator();
    try {
      const auto& t = ck.trainer;
      phase_ = t.at("phase").get<std::string>();
      phase_images_ = t.at("phase_images").get<std::uint64_t>();
      step_ = t.at("step").get<std::uint64_t>();
      restore_rng(rng_, t.at("rng").get<std::string>());
      order_ = t.at("order").get<std::vector<std::size_t>>();
      cursor_ = t.at("cursor").get<std::size_t>();
      last_interval_ = t.at("last_interval").get<std::uint64_t>();
      g_opt_.load_state("g", ck.tensors, t.at("optimizer"));
      d_opt_.load_state("d", ck.tensors, t.at("optimizer"));
    } catch (const std::exception& e) {
      throw IoError(fmt::format("{}: incomplete trainer state ({})", path.string(), e.what()));
    }
    if (order_.size() != bank_.size()) {
      throw InvalidArgument(fmt::format("{} was trained on {} images, the manifest has {}", path.string(),
                                        order_.size(), bank_.size()));
    }
    stage_ = ck.stage;
    images_seen_ = ck.images_seen;
    spdlog::info("resumed from {} at stage {} ({}, {} images seen)", path.string(), stage_, phase_, images_seen_);
  }

  const TrainSchedule& schedule_;
  const TrainOptions& options_;
  std::string hash_;
  std::mt19937_64 rng_;
  ImageBank bank_;
  Generator g_;
  Discriminator d_;
  Adam g_opt_, d_opt_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
  int stage_ = 1;
  std::string phase_ = "stabilize";
  std::uint64_t phase_images_ = 0;
  std::uint64_t images_seen_ = 0;
  std::uint64_t step_ = 0;
  std::uint64_t last_interval_ = 0;
  std::ofstream log_;
  std::mutex log_mutex_;
  TrainResult result_;
};

}  // namespace

TrainResult train(const imaging::DatasetManifest& manifest, const TrainSchedule& schedule,
                  const TrainOptions& options) {
  schedule.validate();
  if (manifest.count(imaging::Split::train) == 0) throw InvalidArgument("manifest has no training images");
  if (manifest.channels != schedule.network.image_channels) {
    throw InvalidArgument(fmt::format("manifest has {} channels, network expects {}", manifest.channels,
                                      schedule.network.image_channels));
  }
  Trainer trainer(manifest, schedule, options);
  return trainer.run();
}

// ---------------------------------------------------------------------------

Tensor sample_latents(const GanCheckpoint& checkpoint, std::size_t count, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return Tensor::randn({count, checkpoint.network.latent_dim}, rng);
}

std::vector<imaging::ImageRecord> generate_from_latents(const GanCheckpoint& checkpoint, const Tensor& latents,
                                                        const fs::path& out_dir, const GenerateOptions& options) {
  if (latents.rank() != 2 || latents.dim(0) == 0) throw InvalidArgument("need at least one latent vector");
  if (options.batch_size == 0) throw InvalidArgument("batch size must be positive");
  const Generator g = checkpoint.generator();
  const std::size_t count = latents.dim(0), dim = latents.dim(1);
  fs::create_directories(out_dir);
  std::vector<imaging::ImageRecord> out;
  out.reserve(count);
  for (std::size_t start = 0; start < count; start += options.batch_size) {
    const std::size_t n = std::min(options.batch_size, count - start);
    Tensor z({n, dim});
    std::copy(latents.data() + start * dim, latents.data() + (start + n) * dim, z.data());
    Tensor images = g.sample(z, checkpoint.stage, 1.0);
    const Shape one{images.dim(1), images.dim(2), images.dim(3)};
    const std::size_t per = shape_size(one);
    for (std::size_t i = 0; i < n; ++i) {
      Tensor px(one);
      for (std::size_t k = 0; k < per; ++k) px[k] = std::clamp<Scalar>(images[i * per + k], -1, 1);
      imaging::ImageRecord rec;
      rec.path = out_dir / fmt::format("{}_{:05d}.png", options.prefix, start + i);
      rec.source_resolution = px.dim(1);
      imaging::save_image(rec.path, px);
      if (options.keep_pixels) rec.pixels = std::move(px);
      out.push_back(std::move(rec));
    }
  }
  return out;
}

std::vector<imaging::ImageRecord> generate(const GanCheckpoint& checkpoint, std::size_t count, std::uint64_t seed,
                                           const fs::path& out_dir, const GenerateOptions& options) {
  if (count == 0) throw InvalidArgument("count must be at least 1");
  return generate_from_latents(checkpoint, sample_latents(checkpoint, count, seed), out_dir, options);
}

}  // namespace dropsynth::gan
