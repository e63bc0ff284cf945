#pragma once

// Procedural droplet scenes: bright soft-edged ellipses on dark noise, with
// exact box ground truth. Stands in for captured droplet frames in tests and
// desk-scale experiments.

#include <cstdint>
#include <filesystem>
#include <random>
#include <vector>

#include "dropsynth/boxes.hpp"
#include "dropsynth/tensor.hpp"

namespace dropsynth::procedural {

struct SceneOptions {
  std::size_t resolution = 64;
  std::size_t channels = 1;
  std::size_t min_droplets = 1;
  std::size_t max_droplets = 3;
  // Semi-axes as a fraction of the image side.
  double min_radius = 0.07;
  double max_radius = 0.16;
  double background = -0.8;
  double noise_std = 0.06;
  double min_brightness = 0.3;
  double max_brightness = 0.95;
  // Width of the anti-aliased rim in pixels.
  double edge_softness = 1.0;
};

struct Scene {
  Tensor pixels;  // C x R x R in [-1, 1]
  std::vector<BoundingBox> boxes;
};

Scene render_scene(const SceneOptions& options, std::mt19937_64& rng);

// Writes `count` scenes as `scene_NNNNN.png` plus `scene_NNNNN.txt` labels
// into `dir` (the layout prepare_dataset reads).
void write_corpus(const std::filesystem::path& dir, std::size_t count, const SceneOptions& options,
                  std::uint64_t seed);

}  // namespace dropsynth::procedural
