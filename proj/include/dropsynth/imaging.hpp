#pragma once

// Image ingestion, dataset manifests, the resolution ladder and the label
// interchange format.

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dropsynth/boxes.hpp"
#include "dropsynth/tensor.hpp"

namespace dropsynth::imaging {

namespace fs = std::filesystem;

enum class Split { train, val, test };
enum class Provenance { real, synthetic };

std::string to_string(Split split);
std::string to_string(Provenance provenance);
Split parse_split(const std::string& text);
Provenance parse_provenance(const std::string& text);

// A decoded image. `pixels` is C x H x W with values in [-1, 1].
struct ImageRecord {
  fs::path path;
  Tensor pixels;
  std::size_t source_resolution = 0;

  std::size_t channels() const { return pixels.dim(0); }
  std::size_t height() const { return pixels.dim(1); }
  std::size_t width() const { return pixels.dim(2); }
};

// Decodes PNG/JPEG/... into `channels` (1 = gray, 3 = RGB) planes in [-1, 1].
ImageRecord load_image(const fs::path& path, std::size_t channels);
// Clamps to [-1, 1], maps to 0..255 and writes an 8-bit PNG.
void save_image(const fs::path& path, const Tensor& pixels);
// [-1, 1] -> 0..255 with rounding; the export mapping used by save_image.
std::uint8_t to_byte(Scalar value);

// ---------------------------------------------------------------------------
// Progressive ladder: stage i (1-based) serves 2^(i+1) x 2^(i+1) images.

inline constexpr int kMaxLadderStage = 9;

struct StageSpec {
  int index = 1;
  std::size_t resolution = 4;
};

class ResolutionLadder {
 public:
  explicit ResolutionLadder(int max_stage);

  static std::size_t resolution_of(int stage);
  int max_stage() const { return max_stage_; }
  std::size_t max_resolution() const { return resolution_of(max_stage_); }
  std::vector<StageSpec> stages() const;

 private:
  int max_stage_;
};

// One area-averaged C x R x R array per ladder stage, coarsest first.
std::vector<Tensor> image_pyramid(const ImageRecord& record, const ResolutionLadder& ladder);

// ---------------------------------------------------------------------------
// Dataset manifest.

struct ManifestEntry {
  fs::path image;
  std::optional<fs::path> label;
  Split split = Split::train;
  Provenance provenance = Provenance::real;
  // Required for synthetic entries: the checkpoint that generated the image.
  std::optional<std::string> checkpoint_id;
  std::optional<double> quality_score;
  // Set when pseudo-labeling produced no confident boxes.
  bool flagged_for_review = false;
};

struct DatasetManifest {
  std::uint64_t seed = 0;
  std::size_t channels = 1;
  std::size_t resolution = 0;
  std::vector<ManifestEntry> entries;
  // Free-form provenance: source directory, ratios, refinement records, ...
  nlohmann::json metadata = nlohmann::json::object();

  std::vector<ManifestEntry> split(Split which) const;
  std::size_t count(Split which) const;

  // Throws InvalidArgument on duplicate image paths or synthetic entries
  // without a checkpoint id.
  void validate() const;

  // Paths under the manifest's directory are stored relative to it.
  void save(const fs::path& path) const;
  static DatasetManifest load(const fs::path& path);

  nlohmann::json to_json(const fs::path& base_dir = {}) const;
  static DatasetManifest from_json(const nlohmann::json& doc, const fs::path& base_dir = {});
};

// Largest-remainder apportionment of `total` items to the three ratios.
std::array<std::size_t, 3> split_counts(std::size_t total, const std::array<double, 3>& ratios);

struct PrepareOptions {
  std::size_t target_resolution = 64;
  std::array<double, 3> split_ratios{0.653, 0.174, 0.173};
  std::uint64_t seed = 0;
  std::size_t channels = 1;
};

// Center-crops every decodable image in `source_dir` to a square, resizes it
// to the target resolution and writes it (plus transformed labels, when a
// `<stem>.txt` exists next to the image or under `labels/`) into
// `out_dir/images/<split>/`. Writes `out_dir/manifest.json`.
DatasetManifest prepare_dataset(const fs::path& source_dir, const fs::path& out_dir, const PrepareOptions& options);

// Square crop + resize of a C x H x W image (area averaging down, bilinear up).
Tensor crop_and_resize(const Tensor& pixels, std::size_t target_resolution);

// ---------------------------------------------------------------------------
// Label files: one `0 cx cy w h` line per box, normalized, 6 decimals.

void write_labels(std::span<const PixelBox> boxes, std::size_t image_size, const fs::path& path);
void write_labels(std::span<const BoundingBox> boxes, const fs::path& path);
std::vector<BoundingBox> read_labels(const fs::path& path);
std::string format_label_line(const BoundingBox& box);

}  // namespace dropsynth::imaging
