#pragma once

// Single-file GAN checkpoint: a tensor archive (see tensor_io.hpp) with
// magic "DSGANCK". Metadata holds the network config, config hash, stage,
// alpha, images_seen and trainer state. Tensor names: generator "g.*",
// critic "d.*", optimizer moments "opt.*".

#include <cstdint>
#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

#include "dropsynth/networks.hpp"
#include "dropsynth/tensor_io.hpp"

namespace dropsynth::gan {

struct GanCheckpoint {
  static constexpr std::uint32_t kFormatVersion = 1;

  NetworkConfig network;
  std::string config_hash;
  int stage = 1;
  Scalar alpha = 1;
  std::uint64_t images_seen = 0;
  // Everything the trainer needs to continue: phase, rng, data order, ...
  nlohmann::json trainer = nlohmann::json::object();
  TensorMap tensors;

  // Stable identifier recorded on synthetic manifest entries.
  std::string id() const;

  void save(const std::filesystem::path& path) const;
  static GanCheckpoint load(const std::filesystem::path& path);

  Generator generator() const;
  Discriminator discriminator() const;
};

// Snapshot of both networks (weights, stage, generator alpha).
GanCheckpoint make_checkpoint(const Generator& g, const Discriminator& d, const std::string& config_hash,
                              std::uint64_t images_seen);

// 64-bit FNV-1a of `text`, as 16 lowercase hex digits.
std::string fnv1a_hex(const std::string& text);

}  // namespace dropsynth::gan
