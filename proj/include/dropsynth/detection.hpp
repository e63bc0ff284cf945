#pragma once

// Box matching and detection metrics (precision, recall, AP, mAP50,
// mAP50-95) for single-class detections.

#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dropsynth/boxes.hpp"
#include "dropsynth/imaging.hpp"

namespace dropsynth::detect {

namespace fs = std::filesystem;

struct Detection {
  std::string image_id;
  BoundingBox box;
  double confidence = 0;
};

// image id -> boxes. Images without boxes still need an (empty) entry so
// their false positives count.
using GroundTruth = std::map<std::string, std::vector<BoundingBox>>;

double iou(const BoundingBox& a, const BoundingBox& b);

struct MatchResult {
  std::vector<bool> true_positive;  // per prediction, in input order
  std::size_t false_negatives = 0;
  std::size_t ground_truth = 0;
  double iou_threshold = 0.5;

  std::size_t tp_count() const;
  std::size_t fp_count() const { return true_positive.size() - tp_count(); }
};

// Greedy matching for one image: predictions by descending confidence (ties
// by lower index) each take the unclaimed box with the highest IoU >= t.
MatchResult match(std::span<const Detection> predictions, std::span<const BoundingBox> truth, double iou_threshold);

struct PrecisionRecall {
  double precision = 1;
  double recall = 0;
};

// No predictions gives precision 1. Throws when there is no ground truth.
PrecisionRecall precision_recall(std::size_t tp, std::size_t fp, std::size_t fn);

// Every prediction of a dataset with its match flag, plus the box total.
struct ScoredMatches {
  std::vector<double> confidence;
  std::vector<bool> true_positive;
  std::size_t ground_truth = 0;
};

ScoredMatches match_dataset(std::span<const Detection> predictions, const GroundTruth& truth, double iou_threshold);

enum class Interpolation { all_point, coco_101 };
std::string to_string(Interpolation i);
Interpolation parse_interpolation(const std::string& text);

// Area under the monotone precision envelope. Needs ground truth.
double average_precision(const ScoredMatches& matches, Interpolation interpolation = Interpolation::all_point);

// One point per prediction, by descending confidence.
struct PrCurve {
  std::vector<double> confidence, precision, recall;
};
PrCurve pr_curve(const ScoredMatches& matches);

struct OperatingPoint {
  double confidence = 0, precision = 1, recall = 0, f1 = 0;
};
OperatingPoint max_f1_point(const PrCurve& curve);

inline constexpr double kIouLadder[10] = {0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95};

struct DetectionReport {
  double map50 = 0;
  double map50_95 = 0;
  // Max-F1 operating point on the IoU 0.5 curve.
  double precision = 1;
  double recall = 0;
  double f1 = 0;
  double confidence = 0;
  std::vector<double> ap_per_threshold;  // aligned with kIouLadder
  PrCurve curve;                         // IoU 0.5
  std::size_t images = 0, ground_truth = 0, predictions = 0;
  Interpolation interpolation = Interpolation::all_point;

  nlohmann::json to_json() const;
  static DetectionReport from_json(const nlohmann::json& doc);
  void save(const fs::path& path) const;
  static DetectionReport load(const fs::path& path);
};

// Predictions for images missing from `truth` are rejected.
DetectionReport map_suite(std::span<const Detection> predictions, const GroundTruth& truth,
                          Interpolation interpolation = Interpolation::all_point);

// ---------------------------------------------------------------------------
// Files. Predictions: `image_id class confidence cx cy w h` per line.

std::vector<Detection> read_predictions(const fs::path& path);
void write_predictions(const fs::path& path, std::span<const Detection> predictions);
std::string format_prediction(const Detection& d);

// The image id of a file is its stem.
std::string image_id(const fs::path& image);

// Labels of every entry of one split (entries without a label file count as
// empty images).
GroundTruth ground_truth(const imaging::DatasetManifest& manifest, imaging::Split split);

}  // namespace dropsynth::detect
