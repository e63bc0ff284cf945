#include "dropsynth/procedural.hpp"

#include <algorithm>
#include <cmath>

#include <fmt/format.h>

#include "dropsynth/error.hpp"
#include "dropsynth/imaging.hpp"

namespace dropsynth::procedural {

namespace {

struct Ellipse {
  double cx, cy, rx, ry, peak;
};

bool overlaps(const Ellipse& a, const Ellipse& b) {
  // Bounding boxes with a one-radius margin stay apart.
  const double gap_x = std::abs(a.cx - b.cx) - (a.rx + b.rx) * 1.2;
  const double gap_y = std::abs(a.cy - b.cy) - (a.ry + b.ry) * 1.2;
  return gap_x < 0 && gap_y < 0;
}

}  // namespace

Scene render_scene(const SceneOptions& o, std::mt19937_64& rng) {
  if (o.resolution < 4) throw InvalidArgument("scene resolution must be at least 4");
  if (o.min_droplets > o.max_droplets || o.min_radius <= 0 || o.min_radius > o.max_radius) {
    throw InvalidArgument("inconsistent scene options");
  }
  const double size = static_cast<double>(o.resolution);
  std::uniform_int_distribution<std::size_t> count_dist(o.min_droplets, o.max_droplets);
  std::uniform_real_distribution<double> radius_dist(o.min_radius * size, o.max_radius * size);
  std::uniform_real_distribution<double> bright_dist(o.min_brightness, o.max_brightness);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, o.noise_std);

  std::vector<Ellipse> drops;
  const std::size_t wanted = count_dist(rng);
  for (int attempt = 0; drops.size() < wanted && attempt < 200; ++attempt) {
    Ellipse e;
    e.rx = radius_dist(rng);
    e.ry = std::clamp(e.rx * (0.75 + 0.5 * unit(rng)), o.min_radius * size, o.max_radius * size);
    e.cx = e.rx + unit(rng) * (size - 2 * e.rx);
    e.cy = e.ry + unit(rng) * (size - 2 * e.ry);
    e.peak = bright_dist(rng);
    if (std::none_of(drops.begin(), drops.end(), [&](const Ellipse& d) { return overlaps(d, e); })) {
      drops.push_back(e);
    }
  }

  Scene scene;
  scene.pixels = Tensor({o.channels, o.resolution, o.resolution});
  const std::size_t plane = o.resolution * o.resolution;
  for (std::size_t y = 0; y < o.resolution; ++y) {
    for (std::size_t x = 0; x < o.resolution; ++x) {
      double v = o.background + noise(rng);
      const double px = x + 0.5, py = y + 0.5;
      for (const auto& d : drops) {
        const double rho = std::hypot((px - d.cx) / d.rx, (py - d.cy) / d.ry);
        const double signed_dist = (rho - 1) * std::min(d.rx, d.ry);
        const double coverage = std::clamp(0.5 - signed_dist / o.edge_softness, 0.0, 1.0);
        if (coverage <= 0) continue;
        // Slightly brighter core, like a lit droplet.
        const double shade = d.peak * (1.0 - 0.25 * std::min(1.0, rho * rho));
        v = v * (1 - coverage) + shade * coverage;
      }
      v = std::clamp(v, -1.0, 1.0);
      for (std::size_t c = 0; c < o.channels; ++c) scene.pixels[c * plane + y * o.resolution + x] = v;
    }
  }
  for (const auto& d : drops) {
    BoundingBox b{(d.cx - d.rx) / size, (d.cy - d.ry) / size, (d.cx + d.rx) / size, (d.cy + d.ry) / size, 0};
    b.x0 = std::max(0.0, b.x0);
    b.y0 = std::max(0.0, b.y0);
    b.x1 = std::min(1.0, b.x1);
    b.y1 = std::min(1.0, b.y1);
    scene.boxes.push_back(b);
  }
  return scene;
}

void write_corpus(const std::filesystem::path& dir, std::size_t count, const SceneOptions& options,
                  std::uint64_t seed) {
  std::filesystem::create_directories(dir);
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < count; ++i) {
    const Scene scene = render_scene(options, rng);
    const std::string stem = fmt::format("scene_{:05d}", i);
    imaging::save_image(dir / (stem + ".png"), scene.pixels);
    imaging::write_labels(scene.boxes, dir / (stem + ".txt"));
  }
}

}  // namespace dropsynth::procedural
