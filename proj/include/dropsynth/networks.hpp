#pragma once

// Progressively grown generator and critic.
//
// Both networks keep their weights as N(0, 1) leaves and apply the He
// constant of each layer at run time (equalized learning rate). Parameters
// live in a name-ordered map so checkpoints and optimizer state can key on
// stable names such as "g.b3.conv1.w" or "d.rgb2.b".

#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dropsynth/autograd.hpp"
#include "dropsynth/tensor.hpp"
#include "dropsynth/tensor_io.hpp"

namespace dropsynth::gan {

struct NetworkConfig {
  std::size_t latent_dim = 512;
  std::size_t image_channels = 1;
  // c_i for stages 1..9; only the first max_stage entries are used.
  std::vector<std::size_t> channels{512, 512, 512, 512, 256, 128, 64, 32, 16};
  int max_stage = 9;
  bool minibatch_stddev = true;
  Scalar leaky_slope = 0.2;
  Scalar pixel_norm_eps = 1e-8;
  // Standard deviation of freshly initialized weights (before run-time scaling).
  Scalar init_std = 1.0;

  void validate() const;
  nlohmann::json to_json() const;
  static NetworkConfig from_json(const nlohmann::json& doc);
};

struct StageConfig {
  int index = 1;
  std::size_t resolution = 4;
  std::size_t channels = 512;

  static StageConfig of(const NetworkConfig& config, int index);
};

using ParameterMap = std::map<std::string, nn::Var>;

// Shared bookkeeping of the two networks: stage list, fade weight, weights.
class ProgressiveNetwork {
 public:
  const NetworkConfig& config() const { return config_; }
  int active_stage() const { return static_cast<int>(stages_.size()); }
  const std::vector<StageConfig>& stages() const { return stages_; }
  std::size_t resolution() const { return stages_.back().resolution; }

  Scalar alpha() const { return alpha_; }
  void set_alpha(Scalar alpha);

  const ParameterMap& parameters() const { return params_; }
  std::vector<nn::Var> parameter_list() const;
  const nn::Var& parameter(const std::string& name) const;
  std::size_t parameter_count() const;

  TensorMap state() const;
  // Overwrites every weight. Names and shapes must match exactly.
  void load_state(const TensorMap& tensors);

  // Appends the next stage. Previous weights are left untouched; alpha
  // restarts at 0.
  void grow(const StageConfig& next, std::mt19937_64& rng);
  void grow(std::mt19937_64& rng) { grow(StageConfig::of(config_, active_stage() + 1), rng); }

 protected:
  ProgressiveNetwork(NetworkConfig config, std::string prefix);
  ProgressiveNetwork(const ProgressiveNetwork& other);
  ProgressiveNetwork& operator=(const ProgressiveNetwork& other);
  ProgressiveNetwork(ProgressiveNetwork&&) noexcept = default;
  ProgressiveNetwork& operator=(ProgressiveNetwork&&) noexcept = default;
  ~ProgressiveNetwork() = default;

  virtual void add_stage_parameters(const StageConfig& stage, std::mt19937_64& rng) = 0;
  void add_parameter(const std::string& name, Shape shape, std::mt19937_64& rng, bool zero);
  const nn::Var& p(const std::string& name) const;
  std::string name(const std::string& suffix) const { return prefix_ + "." + suffix; }
  void check_stage(int stage, Scalar alpha) const;
  std::size_t channels_of(int stage) const { return stages_.at(static_cast<std::size_t>(stage - 1)).channels; }

  NetworkConfig config_;
  std::string prefix_;
  std::vector<StageConfig> stages_;
  Scalar alpha_ = 1;
  ParameterMap params_;
};

class Generator : public ProgressiveNetwork {
 public:
  // Stage-1 network.
  Generator(NetworkConfig config, std::mt19937_64& rng);
  Generator(const Generator&) = default;  // deep copy of weights
  Generator& operator=(const Generator&) = default;
  Generator(Generator&&) noexcept = default;
  Generator& operator=(Generator&&) noexcept = default;

  // z: N x latent_dim. Returns N x C x R x R with R = 2^(stage+1), linear
  // (not clamped).
  nn::Var forward(const nn::Var& z, int stage, Scalar alpha) const;
  nn::Var forward(const nn::Var& z) const { return forward(z, active_stage(), alpha_); }
  // Gradient-free evaluation.
  Tensor sample(const Tensor& z, int stage, Scalar alpha) const;

  Tensor sample_latents(std::size_t count, std::mt19937_64& rng) const;

 private:
  void add_stage_parameters(const StageConfig& stage, std::mt19937_64& rng) override;
  nn::Var to_rgb(const nn::Var& h, int stage) const;
  nn::Var block(const nn::Var& h, int stage) const;
};

class Discriminator : public ProgressiveNetwork {
 public:
  Discriminator(NetworkConfig config, std::mt19937_64& rng);
  Discriminator(const Discriminator&) = default;
  Discriminator& operator=(const Discriminator&) = default;
  Discriminator(Discriminator&&) noexcept = default;
  Discriminator& operator=(Discriminator&&) noexcept = default;

  // images: N x C x R x R. Returns N unbounded scores (shape {N}).
  nn::Var forward(const nn::Var& images, int stage, Scalar alpha) const;
  nn::Var forward(const nn::Var& images) const { return forward(images, active_stage(), alpha_); }
  Tensor score(const Tensor& images, int stage, Scalar alpha) const;

 private:
  void add_stage_parameters(const StageConfig& stage, std::mt19937_64& rng) override;
  nn::Var from_rgb(const nn::Var& x, int stage) const;
  nn::Var block(const nn::Var& h, int stage) const;
  nn::Var head(const nn::Var& h) const;
};

// Appends the standard deviation over the batch, averaged to one scalar, as
// an extra constant feature map.
nn::Var minibatch_stddev(const nn::Var& h, Scalar eps = 1e-8);

}  // namespace dropsynth::gan
