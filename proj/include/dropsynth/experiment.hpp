#pragma once

// Augmentation experiments: pseudo-label synthetic images with a detector
// trained on real data, mix them into the training split in growing rungs,
// retrain and compare detection metrics on fixed val/test splits.

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dropsynth/detection.hpp"
#include "dropsynth/fid.hpp"
#include "dropsynth/imaging.hpp"

namespace dropsynth::experiment {

namespace fs = std::filesystem;

// A detector treated as a black box: train on a manifest's train split,
// predict boxes for a list of images.
class DetectorBackend {
 public:
  virtual ~DetectorBackend() = default;
  virtual std::string name() const = 0;
  // Returns the path of the trained model artifact (inside work_dir).
  virtual fs::path train(const fs::path& manifest_path, const nlohmann::json& config, const fs::path& work_dir) = 0;
  // Image ids are file stems.
  virtual std::vector<detect::Detection> predict(const fs::path& model, const std::vector<fs::path>& images,
                                                 const fs::path& work_dir) = 0;
};

// Thresholds the image, takes connected bright components as droplets and
// boxes them. "Training" grid-searches the threshold and box padding for the
// best mAP50-95 on the labeled train split. Deterministic.
struct StubModel {
  double threshold = 0;
  double pad = 0;            // fraction of the component size added per side
  double min_area = 0;       // fraction of the image area
  std::size_t channels = 1;

  nlohmann::json to_json() const;
  static StubModel from_json(const nlohmann::json& doc);
  void save(const fs::path& path) const;
  static StubModel load(const fs::path& path);
};

class StubDetector : public DetectorBackend {
 public:
  std::string name() const override { return "stub"; }
  fs::path train(const fs::path& manifest_path, const nlohmann::json& config, const fs::path& work_dir) override;
  std::vector<detect::Detection> predict(const fs::path& model, const std::vector<fs::path>& images,
                                         const fs::path& work_dir) override;

  static StubModel fit(const imaging::DatasetManifest& manifest, const nlohmann::json& config = {});
  static std::vector<detect::Detection> detect(const StubModel& model, const Tensor& pixels, const std::string& id);
};

// Runs user commands. Placeholders:
//   train:   {manifest} {config} {out}   -> must create the model file {out}
//   predict: {model} {images} {out}      -> must write a prediction file {out}
// {images} is a directory holding links to the images.
class CommandBackend : public DetectorBackend {
 public:
  CommandBackend(std::string train_command, std::string predict_command);
  std::string name() const override { return "command"; }
  fs::path train(const fs::path& manifest_path, const nlohmann::json& config, const fs::path& work_dir) override;
  std::vector<detect::Detection> predict(const fs::path& model, const std::vector<fs::path>& images,
                                         const fs::path& work_dir) override;

 private:
  std::string train_command_, predict_command_;
};

// ---------------------------------------------------------------------------

// Generated images as train-split synthetic entries of one checkpoint.
imaging::DatasetManifest synthetic_manifest(const std::vector<fs::path>& images, const std::string& checkpoint_id,
                                            std::size_t resolution, std::size_t channels = 1);

struct PseudoLabelOptions {
  double confidence_floor = 0.25;
  fs::path label_dir;
  // Optional command run after labeling; {labels} and {manifest} expand to
  // the label directory and the labeled manifest. It may rewrite labels.
  std::optional<std::string> refine_command;
};

struct PseudoLabelResult {
  imaging::DatasetManifest manifest;
  std::vector<std::size_t> box_counts;  // per entry, after refinement
  std::size_t raw_predictions = 0;      // before the confidence floor
  std::size_t flagged = 0;
  bool refined = false;
};

PseudoLabelResult pseudo_label(DetectorBackend& backend, const fs::path& model,
                               const imaging::DatasetManifest& synthetic, const PseudoLabelOptions& options,
                               const fs::path& work_dir);

// Labels of a manifest scored against known boxes (labels act as
// predictions of confidence 1, IoU 0.5).
detect::PrecisionRecall label_quality(const imaging::DatasetManifest& labeled, const detect::GroundTruth& truth);

// All real entries (every split) plus the best (rung_size - real train count)
// synthetic entries by quality score, ties in a seeded shuffle order. The
// order does not depend on rung_size, so larger rungs contain smaller ones.
imaging::DatasetManifest build_mix(const imaging::DatasetManifest& real, const imaging::DatasetManifest& synthetic,
                                   std::size_t rung_size, std::uint64_t seed);

// ---------------------------------------------------------------------------

enum class Metric { precision, recall, map50, map50_95 };
std::string to_string(Metric m);

struct RungMetrics {
  double precision = 0, recall = 0, map50 = 0, map50_95 = 0;

  double get(Metric m) const;
  static RungMetrics from(const detect::DetectionReport& r);
  nlohmann::json to_json() const;
  static RungMetrics from_json(const nlohmann::json& doc);
};

struct RungResult {
  std::size_t train_size = 0;
  std::size_t real = 0;
  std::size_t synthetic = 0;
  std::optional<RungMetrics> val, test;
  std::string error;  // empty when the rung completed

  bool ok() const { return error.empty() && val && test; }
};

// (value - base) / base. Throws when base <= 0.
double relative_improvement(double base, double value);

struct HygieneReport {
  std::vector<std::string> problems;

  bool ok() const { return problems.empty(); }
  nlohmann::json to_json() const;
};

// No image in two splits of a rung; val and test identical (paths and file
// bytes) across rungs; synthetic subsets nested; every synthetic entry has a
// checkpoint id and a label file.
HygieneReport check_split_hygiene(const std::vector<imaging::DatasetManifest>& rungs);

struct ExperimentReport {
  std::string backend;
  std::uint64_t seed = 0;
  std::vector<RungResult> rungs;
  HygieneReport hygiene;

  bool complete() const;
  // Relative change of rung `index` against rung 0.
  double improvement(std::size_t index, imaging::Split split, Metric metric) const;

  nlohmann::json to_json() const;
  static ExperimentReport from_json(const nlohmann::json& doc);
  void save(const fs::path& path) const;
  static ExperimentReport load(const fs::path& path);
  // Fixed-width table: train size, then Pre./Rec./mAP50/mAP50-95 for val and
  // test, followed by the mAP50-95 change of each rung.
  std::string render_table() const;
};

struct LadderOptions {
  std::vector<std::size_t> rungs;
  std::uint64_t seed = 0;
  fs::path work_dir;
  nlohmann::json backend_config = nlohmann::json::object();
  detect::Interpolation interpolation = detect::Interpolation::all_point;
};

// Rung 0 must equal the real train count. A failing rung is recorded and the
// remaining rungs still run; check complete() on the result.
ExperimentReport run_ladder(DetectorBackend& backend, const imaging::DatasetManifest& real,
                            const imaging::DatasetManifest& synthetic, const LadderOptions& options);

// ---------------------------------------------------------------------------
// Quality ranking of generated images (a selection policy of ours).
//
// Candidates are taken in order on a cycle; every run of `window` consecutive
// candidates is fit with a Gaussian and scored by its Frechet distance to the
// reference. A candidate's score is minus the mean distance of the windows it
// belongs to, so higher is better.
std::vector<double> quality_rank(const fid::FeatureSet& candidates, const fid::GaussianStats& reference,
                                 std::size_t window);

// Indices of the k best scores (ties by lower index), best first.
std::vector<std::size_t> select_top(const std::vector<double>& scores, std::size_t k);

}  // namespace dropsynth::experiment
