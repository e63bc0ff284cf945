#pragma once

// Progressive adversarial training: losses, gradient penalty, optimizer,
// schedule, the training loop and image generation from checkpoints.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dropsynth/checkpoint.hpp"
#include "dropsynth/error.hpp"
#include "dropsynth/imaging.hpp"
#include "dropsynth/networks.hpp"

namespace dropsynth::gan {

enum class LossMode { standard, wasserstein };

std::string to_string(LossMode mode);
LossMode parse_loss_mode(const std::string& text);

struct Losses {
  nn::Var g_loss;
  nn::Var d_loss_core;
};

// standard: sigmoid cross-entropy on logits, non-saturating generator loss.
// wasserstein: d = mean(fake) - mean(real), g = -mean(fake).
// Throws InvalidArgument naming the side when scores contain NaN.
Losses minimax_losses(const nn::Var& d_real, const nn::Var& d_fake, LossMode mode);

using Critic = std::function<nn::Var(const nn::Var&)>;

struct PenaltyResult {
  nn::Var penalty;        // lambda * mean((|grad| - 1)^2), shape {1}
  Tensor interpolates;    // x_hat
  Tensor epsilon;         // one mixing weight per pair
  Tensor gradient_norms;  // |grad D(x_hat)| per sample
};

// x_hat = fake + eps * (real - fake), clamped into the pair's interval.
Tensor interpolate(const Tensor& real, const Tensor& fake, const Tensor& epsilon);

// Draws eps ~ U(0, 1) per pair. With create_graph the penalty can be
// differentiated with respect to the critic's parameters.
PenaltyResult gradient_penalty(const Critic& critic, const Tensor& real, const Tensor& fake, Scalar lambda,
                               std::mt19937_64& rng, bool create_graph = true);
// Same, at given interpolates.
PenaltyResult gradient_penalty_at(const Critic& critic, const Tensor& interpolates, Scalar lambda,
                                  bool create_graph = true);

// ---------------------------------------------------------------------------

struct AdamConfig {
  Scalar lr = 1e-3;
  Scalar beta1 = 0.0;
  Scalar beta2 = 0.99;
  Scalar eps = 1e-8;

  nlohmann::json to_json() const;
  static AdamConfig from_json(const nlohmann::json& doc);
};

// Adam with per-parameter step counts, keyed by parameter name so weights
// added by growth start with fresh moments.
class Adam {
 public:
  explicit Adam(AdamConfig config = {}) : config_(config) {}

  void step(const ParameterMap& params, const std::vector<nn::Var>& grads);

  const AdamConfig& config() const { return config_; }
  // Moments as "opt.<tag>.m.<param>" / "opt.<tag>.v.<param>" plus step counts.
  void save_state(const std::string& tag, TensorMap& tensors, nlohmann::json& meta) const;
  void load_state(const std::string& tag, const TensorMap& tensors, const nlohmann::json& meta);

 private:
  struct Slot {
    Tensor m, v;
    std::uint64_t t = 0;
  };
  AdamConfig config_;
  std::map<std::string, Slot> slots_;
};

// ---------------------------------------------------------------------------

struct StageSchedule {
  // Both phases are counted in real images shown to the critic.
  std::uint64_t fade_images = 0;  // ignored for stage 1
  std::uint64_t stabilize_images = 0;
  std::size_t batch_size = 16;
};

struct TrainSchedule {
  NetworkConfig network;
  // Last stage trained; at most network.max_stage.
  int max_stage = 9;
  // Entry i describes stage i + 1.
  std::vector<StageSchedule> stages;
  AdamConfig g_optimizer;
  AdamConfig d_optimizer;
  Scalar lambda = 10;
  int n_critic = 1;
  LossMode mode = LossMode::wasserstein;
  // Small pull of real scores toward 0, keeping the critic's output from
  // drifting (cited-architecture practice).
  Scalar drift = 1e-3;
  // Extra checkpoints every this many images (0: stage boundaries only).
  std::uint64_t checkpoint_interval = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static TrainSchedule from_json(const nlohmann::json& doc);
  static TrainSchedule load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;
  std::string hash() const;

  // Full-size ladder (1024 px, 800k images per phase).
  static TrainSchedule paper_scale();
  // Narrow networks and short phases for CPU runs. `final_images` sets the
  // last stabilize phase (0 keeps images_per_phase).
  static TrainSchedule desk_scale(int max_stage, std::uint64_t images_per_phase, std::uint64_t final_images = 0);
};

struct StepRecord {
  std::uint64_t step = 0;
  int stage = 1;
  std::string phase;
  Scalar alpha = 1;
  std::uint64_t images_seen = 0;
  double d_loss = 0;
  double g_loss = 0;
  double penalty = 0;
  double grad_norm_mean = 0;
  double seconds = 0;

  nlohmann::json to_json() const;
};

struct CheckpointEvent {
  std::filesystem::path path;
  int stage = 1;
  Scalar alpha = 1;
  std::uint64_t images_seen = 0;
  std::string reason;  // "interval", "stage", "emergency"
};

struct TrainOptions {
  std::filesystem::path out_dir;
  std::uint64_t seed = 0;
  // Continue from this checkpoint; the schedule hash must match.
  std::optional<std::filesystem::path> resume;
  std::function<void(const StepRecord&)> on_step;
  std::function<void(const CheckpointEvent&)> on_checkpoint;
  // Called with both networks before every step (fault injection in tests).
  std::function<void(Generator&, Discriminator&)> before_step;
  // Test hook: stop (without error) after this many steps.
  std::optional<std::uint64_t> max_steps;
};

struct TrainResult {
  std::vector<CheckpointEvent> checkpoints;
  std::filesystem::path final_checkpoint;
  std::uint64_t steps = 0;
  std::uint64_t images_seen = 0;
  bool completed = false;
};

// Raised after the emergency checkpoint when a loss becomes non-finite.
class TrainingAborted : public Error {
 public:
  TrainingAborted(const std::string& what, std::filesystem::path checkpoint)
      : Error(what), checkpoint_(std::move(checkpoint)) {}
  const std::filesystem::path& checkpoint() const { return checkpoint_; }

 private:
  std::filesystem::path checkpoint_;
};

// Trains on the manifest's train split. Writes stage checkpoints
// (`stage<i>.ckpt`), interval checkpoints and `train_log.ndjson` into
// options.out_dir.
TrainResult train(const imaging::DatasetManifest& manifest, const TrainSchedule& schedule,
                  const TrainOptions& options);

// Real batches during fade-in mix the image with its blurred previous-stage
// version: alpha * x + (1 - alpha) * up(down(x)).
Tensor fade_real_batch(const Tensor& batch, Scalar alpha);

// ---------------------------------------------------------------------------

struct GenerateOptions {
  std::size_t batch_size = 8;
  bool keep_pixels = true;
  std::string prefix = "gen";
};

// Writes `count` PNGs (`<prefix>_NNNNN.png`) at the checkpoint's resolution
// with alpha forced to 1. Deterministic in `seed`.
std::vector<imaging::ImageRecord> generate(const GanCheckpoint& checkpoint, std::size_t count, std::uint64_t seed,
                                           const std::filesystem::path& out_dir, const GenerateOptions& options = {});
// Same, for explicit latents (N x latent_dim).
std::vector<imaging::ImageRecord> generate_from_latents(const GanCheckpoint& checkpoint, const Tensor& latents,
                                                        const std::filesystem::path& out_dir,
                                                        const GenerateOptions& options = {});
Tensor sample_latents(const GanCheckpoint& checkpoint, std::size_t count, std::uint64_t seed);

}  // namespace dropsynth::gan
