#include "dropsynth/networks.hpp"

#include <cmath>

#include <fmt/format.h>

#include "dropsynth/error.hpp"
#include "dropsynth/imaging.hpp"

namespace dropsynth::gan {

using nn::Var;

namespace {

const Scalar kSqrt2 = std::sqrt(2.0);

Var add_bias(const Var& y, const Var& b) {
  const std::size_t c = b.shape()[0];
  if (y.shape().size() == 4) return nn::add(y, nn::broadcast_to(nn::reshape(b, {1, c, 1, 1}), y.shape()));
  return nn::add(y, nn::broadcast_to(nn::reshape(b, {1, c}), y.shape()));
}

// Equalized-lr convolution: the stored weight is rescaled by gain / sqrt(fan_in).
Var conv(const Var& x, const Var& w, const Var& b, Scalar gain, std::size_t pad) {
  const Shape& ws = w.shape();
  const Scalar fan_in = static_cast<Scalar>(ws[1] * ws[2] * ws[3]);
  return add_bias(nn::conv2d(x, nn::scale(w, gain / std::sqrt(fan_in)), {1, pad, pad}), b);
}

Var dense(const Var& x, const Var& w, const Var& b, Scalar gain) {
  const Scalar fan_in = static_cast<Scalar>(w.shape()[0]);
  return add_bias(nn::matmul(x, nn::scale(w, gain / std::sqrt(fan_in))), b);
}

}  // namespace

// ---------------------------------------------------------------------------

void NetworkConfig::validate() const {
  if (latent_dim == 0) throw InvalidArgument("latent_dim must be positive");
  if (image_channels == 0) throw InvalidArgument("image_channels must be positive");
  if (max_stage < 1 || max_stage > imaging::kMaxLadderStage) {
    throw InvalidArgument(fmt::format("max_stage must be in [1, {}], got {}", imaging::kMaxLadderStage, max_stage));
  }
  if (channels.size() < static_cast<std::size_t>(max_stage)) {
    throw InvalidArgument(fmt::format("channel schedule has {} entries, max_stage {} needs that many",
                                      channels.size(), max_stage));
  }
  for (std::size_t i = 0; i < channels.size(); ++i) {
    if (channels[i] == 0) throw InvalidArgument("channel counts must be positive");
    if (i > 0 && channels[i] > channels[i - 1]) {
      throw InvalidArgument(fmt::format("channel schedule must be non-increasing (stage {}: {} > {})", i + 1,
                                        channels[i], channels[i - 1]));
    }
  }
  if (!(leaky_slope >= 0) || !(pixel_norm_eps >= 0) || !(init_std > 0)) {
    throw InvalidArgument("invalid activation or initialization constants");
  }
}

nlohmann::json NetworkConfig::to_json() const {
  return {{"latent_dim", latent_dim},         {"image_channels", image_channels},
          {"channels", channels},             {"max_stage", max_stage},
          {"minibatch_stddev", minibatch_stddev}, {"leaky_slope", leaky_slope},
          {"pixel_norm_eps", pixel_norm_eps}, {"init_std", init_std}};
}

NetworkConfig NetworkConfig::from_json(const nlohmann::json& doc) {
  NetworkConfig c;
  c.latent_dim = doc.value("latent_dim", c.latent_dim);
  c.image_channels = doc.value("image_channels", c.image_channels);
  c.channels = doc.value("channels", c.channels);
  c.max_stage = doc.value("max_stage", c.max_stage);
  c.minibatch_stddev = doc.value("minibatch_stddev", c.minibatch_stddev);
  c.leaky_slope = doc.value("leaky_slope", c.leaky_slope);
  c.pixel_norm_eps = doc.value("pixel_norm_eps", c.pixel_norm_eps);
  c.init_std = doc.value("init_std", c.init_std);
  c.validate();
  return c;
}

StageConfig StageConfig::of(const NetworkConfig& config, int index) {
  if (index < 1 || index > imaging::kMaxLadderStage) {
    throw InvalidArgument(fmt::format("stage {} is outside the ladder [1, {}]", index, imaging::kMaxLadderStage));
  }
  if (index > config.max_stage) {
    throw InvalidArgument(fmt::format("stage {} exceeds configured max_stage {}", index, config.max_stage));
  }
  return {index, imaging::ResolutionLadder::resolution_of(index), config.channels[static_cast<std::size_t>(index - 1)]};
}

// ---------------------------------------------------------------------------

ProgressiveNetwork::ProgressiveNetwork(NetworkConfig config, std::string prefix)
    : config_(std::move(config)), prefix_(std::move(prefix)) {
  config_.validate();
}

ProgressiveNetwork::ProgressiveNetwork(const ProgressiveNetwork& other)
    : config_(other.config_), prefix_(other.prefix_), stages_(other.stages_), alpha_(other.alpha_) {
  for (const auto& [key, v] : other.params_) params_.emplace(key, Var(v.value(), true));
}

ProgressiveNetwork& ProgressiveNetwork::operator=(const ProgressiveNetwork& other) {
  if (this != &other) {
    config_ = other.config_;
    prefix_ = other.prefix_;
    stages_ = other.stages_;
    alpha_ = other.alpha_;
    params_.clear();
    for (const auto& [key, v] : other.params_) params_.emplace(key, Var(v.value(), true));
  }
  return *this;
}

void ProgressiveNetwork::set_alpha(Scalar alpha) {
  if (!(alpha >= 0 && alpha <= 1)) throw InvalidArgument(fmt::format("alpha must be in [0, 1], got {}", alpha));
  alpha_ = alpha;
}

std::vector<Var> ProgressiveNetwork::parameter_list() const {
  std::vector<Var> out;
  out.reserve(params_.size());
  for (const auto& [key, v] : params_) out.push_back(v);
  return out;
}

const Var& ProgressiveNetwork::parameter(const std::string& key) const {
  const auto it = params_.find(key);
  if (it == params_.end()) throw InvalidArgument(fmt::format("no parameter named '{}'", key));
  return it->second;
}

std::size_t ProgressiveNetwork::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [key, v] : params_) n += v.value().size();
  return n;
}

TensorMap ProgressiveNetwork::state() const {
  TensorMap out;
  for (const auto& [key, v] : params_) out.emplace(key, v.value());
  return out;
}

void ProgressiveNetwork::load_state(const TensorMap& tensors) {
  if (tensors.size() != params_.size()) {
    throw InvalidArgument(fmt::format("{} network expects {} tensors, got {}", prefix_, params_.size(), tensors.size()));
  }
  for (auto& [key, v] : params_) {
    const auto it = tensors.find(key);
    if (it == tensors.end()) throw InvalidArgument(fmt::format("missing tensor '{}'", key));
    if (it->second.shape() != v.shape()) {
      throw InvalidArgument(fmt::format("tensor '{}' has shape {}, expected {}", key, shape_string(it->second.shape()),
                                        shape_string(v.shape())));
    }
    v.mutable_value() = it->second;
  }
}

void ProgressiveNetwork::grow(const StageConfig& next, std::mt19937_64& rng) {
  const int expected = active_stage() + 1;
  if (next.index != expected) {
    throw InvalidArgument(fmt::format("cannot grow from stage {} to stage {}; stages are added one at a time",
                                      active_stage(), next.index));
  }
  if (next.index > imaging::kMaxLadderStage || next.index > config_.max_stage) {
    throw InvalidArgument(fmt::format("cannot grow to stage {}: the ladder ends at stage {}", next.index,
                                      std::min(imaging::kMaxLadderStage, config_.max_stage)));
  }
  if (next.resolution != imaging::ResolutionLadder::resolution_of(next.index)) {
    throw InvalidArgument(fmt::format("stage {} must have resolution {}, got {}", next.index,
                                      imaging::ResolutionLadder::resolution_of(next.index), next.resolution));
  }
  if (next.channels == 0 || (!stages_.empty() && next.channels > stages_.back().channels)) {
    throw InvalidArgument(fmt::format("stage {} channels {} must be positive and not exceed the previous stage",
                                      next.index, next.channels));
  }
  add_stage_parameters(next, rng);
  stages_.push_back(next);
  config_.channels[static_cast<std::size_t>(next.index - 1)] = next.channels;
  alpha_ = stages_.size() == 1 ? 1 : 0;
}

void ProgressiveNetwork::add_parameter(const std::string& key, Shape shape, std::mt19937_64& rng, bool zero) {
  Tensor t = zero ? Tensor(shape) : Tensor::randn(shape, rng, config_.init_std);
  params_.insert_or_assign(name(key), Var(std::move(t), true));
}

const Var& ProgressiveNetwork::p(const std::string& suffix) const { return parameter(name(suffix)); }

void ProgressiveNetwork::check_stage(int stage, Scalar alpha) const {
  if (stage < 1 || stage > active_stage()) {
    throw InvalidArgument(fmt::format("stage {} requested but the network has only grown to stage {}", stage,
                                      active_stage()));
  }
  if (!(alpha >= 0 && alpha <= 1)) throw InvalidArgument(fmt::format("alpha must be in [0, 1], got {}", alpha));
}

// ---------------------------------------------------------------------------
// Generator.

Generator::Generator(NetworkConfig config, std::mt19937_64& rng) : ProgressiveNetwork(std::move(config), "g") {
  ProgressiveNetwork::grow(StageConfig::of(config_, 1), rng);
}

void Generator::add_stage_parameters(const StageConfig& s, std::mt19937_64& rng) {
  const std::size_t c = s.channels;
  const std::string b = fmt::format("b{}.", s.index);
  if (s.index == 1) {
    add_parameter(b + "dense.w", {config_.latent_dim, c * 16}, rng, false);
    add_parameter(b + "dense.b", {c * 16}, rng, true);
    add_parameter(b + "conv.w", {c, c, 3, 3}, rng, false);
    add_parameter(b + "conv.b", {c}, rng, true);
  } else {
    const std::size_t prev = stages_.back().channels;
    add_parameter(b + "conv1.w", {c, prev, 3, 3}, rng, false);
    add_parameter(b + "conv1.b", {c}, rng, true);
    add_parameter(b + "conv2.w", {c, c, 3, 3}, rng, false);
    add_parameter(b + "conv2.b", {c}, rng, true);
  }
  add_parameter(fmt::format("rgb{}.w", s.index), {config_.image_channels, c, 1, 1}, rng, false);
  add_parameter(fmt::format("rgb{}.b", s.index), {config_.image_channels}, rng, true);
}

Var Generator::to_rgb(const Var& h, int stage) const {
  return conv(h, p(fmt::format("rgb{}.w", stage)), p(fmt::format("rgb{}.b", stage)), 1.0, 0);
}

Var Generator::block(const Var& h, int stage) const {
  const Scalar slope = config_.leaky_slope, eps = config_.pixel_norm_eps;
  const std::string b = fmt::format("b{}.", stage);
  Var x = nn::upsample_nearest2x(h);
  x = nn::pixel_norm(nn::leaky_relu(conv(x, p(b + "conv1.w"), p(b + "conv1.b"), kSqrt2, 1), slope), eps);
  return nn::pixel_norm(nn::leaky_relu(conv(x, p(b + "conv2.w"), p(b + "conv2.b"), kSqrt2, 1), slope), eps);
}

Var Generator::forward(const Var& z, int stage, Scalar alpha) const {
  check_stage(stage, alpha);
  if (z.shape().size() != 2 || z.shape()[1] != config_.latent_dim) {
    throw InvalidArgument(fmt::format("latent batch must be N x {}, got {}", config_.latent_dim, shape_string(z.shape())));
  }
  const Scalar slope = config_.leaky_slope, eps = config_.pixel_norm_eps;
  const std::size_t n = z.shape()[0], c1 = channels_of(1);

  Var h = nn::reshape(nn::pixel_norm(nn::reshape(z, {n, config_.latent_dim, 1, 1}), eps), {n, config_.latent_dim});
  // The cited architecture scales the first dense layer by sqrt(2) / 4.
  h = nn::reshape(dense(h, p("b1.dense.w"), p("b1.dense.b"), kSqrt2 / 4), {n, c1, 4, 4});
  h = nn::pixel_norm(nn::leaky_relu(h, slope), eps);
  h = nn::pixel_norm(nn::leaky_relu(conv(h, p("b1.conv.w"), p("b1.conv.b"), kSqrt2, 1), slope), eps);
  if (stage == 1) return to_rgb(h, 1);

  for (int i = 2; i < stage; ++i) h = block(h, i);
  const Var prev = h;
  const Var fresh = to_rgb(block(prev, stage), stage);
  if (alpha >= 1) return fresh;
  const Var old = nn::upsample_nearest2x(to_rgb(prev, stage - 1));
  return nn::lerp(old, fresh, alpha);
}

Tensor Generator::sample(const Tensor& z, int stage, Scalar alpha) const {
  nn::NoGradGuard guard;
  return forward(Var(z), stage, alpha).value();
}

Tensor Generator::sample_latents(std::size_t count, std::mt19937_64& rng) const {
  return Tensor::randn({count, config_.latent_dim}, rng);
}

// ---------------------------------------------------------------------------
// Discriminator.

Discriminator::Discriminator(NetworkConfig config, std::mt19937_64& rng)
    : ProgressiveNetwork(std::move(config), "d") {
  ProgressiveNetwork::grow(StageConfig::of(config_, 1), rng);
}

void Discriminator::add_stage_parameters(const StageConfig& s, std::mt19937_64& rng) {
  const std::size_t c = s.channels;
  const std::string b = fmt::format("b{}.", s.index);
  if (s.index == 1) {
    const std::size_t in = c + (config_.minibatch_stddev ? 1 : 0);
    add_parameter(b + "conv.w", {c, in, 3, 3}, rng, false);
    add_parameter(b + "conv.b", {c}, rng, true);
    add_parameter(b + "conv4.w", {c, c, 4, 4}, rng, false);
    add_parameter(b + "conv4.b", {c}, rng, true);
    add_parameter(b + "fc.w", {c, 1}, rng, false);
    add_parameter(b + "fc.b", {1}, rng, true);
  } else {
    const std::size_t prev = stages_.back().channels;
    add_parameter(b + "conv1.w", {c, c, 3, 3}, rng, false);
    add_parameter(b + "conv1.b", {c}, rng, true);
    add_parameter(b + "conv2.w", {prev, c, 3, 3}, rng, false);
    add_parameter(b + "conv2.b", {prev}, rng, true);
  }
  add_parameter(fmt::format("rgb{}.w", s.index), {c, config_.image_channels, 1, 1}, rng, false);
  add_parameter(fmt::format("rgb{}.b", s.index), {c}, rng, true);
}

Var Discriminator::from_rgb(const Var& x, int stage) const {
  return nn::leaky_relu(conv(x, p(fmt::format("rgb{}.w", stage)), p(fmt::format("rgb{}.b", stage)), kSqrt2, 0),
                        config_.leaky_slope);
}

Var Discriminator::block(const Var& h, int stage) const {
  const Scalar slope = config_.leaky_slope;
  const std::string b = fmt::format("b{}.", stage);
  Var x = nn::leaky_relu(conv(h, p(b + "conv1.w"), p(b + "conv1.b"), kSqrt2, 1), slope);
  x = nn::leaky_relu(conv(x, p(b + "conv2.w"), p(b + "conv2.b"), kSqrt2, 1), slope);
  return nn::avg_pool2x(x);
}

Var Discriminator::head(const Var& h) const {
  const Scalar slope = config_.leaky_slope;
  const std::size_t n = h.shape()[0], c = channels_of(1);
  Var x = config_.minibatch_stddev ? minibatch_stddev(h) : h;
  x = nn::leaky_relu(conv(x, p("b1.conv.w"), p("b1.conv.b"), kSqrt2, 1), slope);
  x = nn::leaky_relu(conv(x, p("b1.conv4.w"), p("b1.conv4.b"), kSqrt2, 0), slope);
  return nn::reshape(dense(nn::reshape(x, {n, c}), p("b1.fc.w"), p("b1.fc.b"), 1.0), {n});
}

Var Discriminator::forward(const Var& images, int stage, Scalar alpha) const {
  check_stage(stage, alpha);
  const std::size_t r = imaging::ResolutionLadder::resolution_of(stage);
  const Shape& s = images.shape();
  if (s.size() != 4 || s[0] == 0 || s[1] != config_.image_channels || s[2] != r || s[3] != r) {
    throw InvalidArgument(fmt::format("stage {} expects N x {} x {} x {} images, got {}", stage,
                                      config_.image_channels, r, r, shape_string(s)));
  }
  Var h = from_rgb(images, stage);
  if (stage > 1) {
    h = block(h, stage);
    if (alpha < 1) h = nn::lerp(from_rgb(nn::avg_pool2x(images), stage - 1), h, alpha);
    for (int i = stage - 1; i >= 2; --i) h = block(h, i);
  }
  return head(h);
}

Tensor Discriminator::score(const Tensor& images, int stage, Scalar alpha) const {
  nn::NoGradGuard guard;
  return forward(Var(images), stage, alpha).value();
}

Var minibatch_stddev(const Var& h, Scalar eps) {
  const Shape& s = h.shape();
  const std::size_t n = s[0];
  const Shape per_pos{1, s[1], s[2], s[3]};
  const Var mu = nn::scale(nn::sum_to(h, per_pos), 1.0 / static_cast<Scalar>(n));
  const Var centered = nn::sub(h, nn::broadcast_to(mu, s));
  const Var var = nn::scale(nn::sum_to(nn::mul(centered, centered), per_pos), 1.0 / static_cast<Scalar>(n));
  const Var sd = nn::mean(nn::pow(nn::add_scalar(var, eps), 0.5));
  const Var plane = nn::broadcast_to(nn::reshape(sd, {1, 1, 1, 1}), {n, 1, s[2], s[3]});
  return nn::concat_channels(h, plane);
}

}  // namespace dropsynth::gan
