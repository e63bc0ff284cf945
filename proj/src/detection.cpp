#include "dropsynth/detection.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include <fmt/format.h>

#include "dropsynth/error.hpp"

namespace dropsynth::detect {

double iou(const BoundingBox& a, const BoundingBox& b) {
  const double iw = std::min(a.x1, b.x1) - std::max(a.x0, b.x0);
  const double ih = std::min(a.y1, b.y1) - std::max(a.y0, b.y0);
  if (iw <= 0 || ih <= 0) return 0.0;
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  return uni > 0 ? std::clamp(inter / uni, 0.0, 1.0) : 0.0;
}

std::size_t MatchResult::tp_count() const {
  return static_cast<std::size_t>(std::count(true_positive.begin(), true_positive.end(), true));
}

namespace {

// Indices by descending confidence, stable so ties keep input order.
std::vector<std::size_t> confidence_order(std::span<const Detection> preds) {
  std::vector<std::size_t> order(preds.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return preds[a].confidence > preds[b].confidence; });
  return order;
}

}  // namespace

MatchResult match(std::span<const Detection> predictions, std::span<const BoundingBox> truth, double iou_threshold) {
  if (!(iou_threshold > 0 && iou_threshold < 1)) {
    throw InvalidArgument(fmt::format("IoU threshold must lie in (0, 1), got {}", iou_threshold));
  }
  MatchResult r;
  r.iou_threshold = iou_threshold;
  r.ground_truth = truth.size();
  r.true_positive.assign(predictions.size(), false);
  std::vector<bool> claimed(truth.size(), false);
  for (std::size_t p : confidence_order(predictions)) {
    double best = -1;
    std::size_t best_gt = truth.size();
    for (std::size_t g = 0; g < truth.size(); ++g) {
      if (claimed[g]) continue;
      const double v = iou(predictions[p].box, truth[g]);
      if (v >= iou_threshold && v > best) {
        best = v;
        best_gt = g;
      }
    }
    if (best_gt < truth.size()) {
      claimed[best_gt] = true;
      r.true_positive[p] = true;
    }
  }
  r.false_negatives = truth.size() - r.tp_count();
  return r;
}

PrecisionRecall precision_recall(std::size_t tp, std::size_t fp, std::size_t fn) {
  if (tp + fn == 0) throw InvalidArgument("recall is undefined without ground-truth boxes");
  PrecisionRecall pr;
  pr.precision = tp + fp == 0 ? 1.0 : static_cast<double>(tp) / static_cast<double>(tp + fp);
  pr.recall = static_cast<double>(tp) / static_cast<double>(tp + fn);
  return pr;
}

ScoredMatches match_dataset(std::span<const Detection> predictions, const GroundTruth& truth, double iou_threshold) {
  std::map<std::string, std::vector<Detection>> by_image;
  for (const auto& d : predictions) {
    if (!truth.contains(d.image_id)) {
      throw InvalidArgument(fmt::format("prediction for unknown image '{}'", d.image_id));
    }
    by_image[d.image_id].push_back(d);
  }
  ScoredMatches out;
  for (const auto& [id, boxes] : truth) {
    out.ground_truth += boxes.size();
    const auto it = by_image.find(id);
    if (it == by_image.end()) continue;
    const MatchResult m = match(it->second, boxes, iou_threshold);
    for (std::size_t i = 0; i < it->second.size(); ++i) {
      out.confidence.push_back(it->second[i].confidence);
      out.true_positive.push_back(m.true_positive[i]);
    }
  }
  return out;
}

std::string to_string(Interpolation i) { return i == Interpolation::all_point ? "all_point" : "coco_101"; }

Interpolation parse_interpolation(const std::string& text) {
  if (text == "all_point") return Interpolation::all_point;
  if (text == "coco_101") return Interpolation::coco_101;
  throw InvalidArgument(fmt::format("unknown interpolation '{}' (expected all_point or coco_101)", text));
}

PrCurve pr_curve(const ScoredMatches& m) {
  if (m.ground_truth == 0) throw InvalidArgument("PR curve needs at least one ground-truth box");
  std::vector<std::size_t> order(m.confidence.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return m.confidence[a] > m.confidence[b]; });
  PrCurve c;
  std::size_t tp = 0;
  for (std::size_t k = 0; k < order.size(); ++k) {
    if (m.true_positive[order[k]]) ++tp;
    c.confidence.push_back(m.confidence[order[k]]);
    c.precision.push_back(static_cast<double>(tp) / static_cast<double>(k + 1));
    c.recall.push_back(static_cast<double>(tp) / static_cast<double>(m.ground_truth));
  }
  return c;
}

double average_precision(const ScoredMatches& m, Interpolation interpolation) {
  const PrCurve c = pr_curve(m);
  const std::size_t n = c.precision.size();
  if (n == 0) return 0.0;
  // Envelope: best precision at this recall or beyond.
  std::vector<double> env(c.precision);
  for (std::size_t k = n - 1; k-- > 0;) env[k] = std::max(env[k], env[k + 1]);

  if (interpolation == Interpolation::all_point) {
    double ap = 0, prev_recall = 0;
    for (std::size_t k = 0; k < n; ++k) {
      ap += (c.recall[k] - prev_recall) * env[k];
      prev_recall = c.recall[k];
    }
    return std::clamp(ap, 0.0, 1.0);
  }
  double sum = 0;
  std::size_t k = 0;
  for (int i = 0; i <= 100; ++i) {
    const double r = i / 100.0;
    while (k < n && c.recall[k] < r - 1e-12) ++k;
    if (k < n) sum += env[k];
  }
  return std::clamp(sum / 101.0, 0.0, 1.0);
}

OperatingPoint max_f1_point(const PrCurve& c) {
  OperatingPoint best;
  for (std::size_t k = 0; k < c.precision.size(); ++k) {
    const double p = c.precision[k], r = c.recall[k];
    const double f1 = p + r > 0 ? 2 * p * r / (p + r) : 0.0;
    if (f1 > best.f1) best = {c.confidence[k], p, r, f1};
  }
  return best;
}

DetectionReport map_suite(std::span<const Detection> predictions, const GroundTruth& truth,
                          Interpolation interpolation) {
  DetectionReport rep;
  rep.interpolation = interpolation;
  rep.images = truth.size();
  rep.predictions = predictions.size();
  double sum = 0;
  for (double t : kIouLadder) {
    const ScoredMatches m = match_dataset(predictions, truth, t);
    const double ap = average_precision(m, interpolation);
    rep.ap_per_threshold.push_back(ap);
    sum += ap;
    if (t == 0.50) {
      rep.ground_truth = m.ground_truth;
      rep.map50 = ap;
      rep.curve = pr_curve(m);
      const OperatingPoint op = max_f1_point(rep.curve);
      rep.precision = op.precision;
      rep.recall = op.recall;
      rep.f1 = op.f1;
      rep.confidence = op.confidence;
    }
  }
  rep.map50_95 = sum / static_cast<double>(std::size(kIouLadder));
  return rep;
}

nlohmann::json DetectionReport::to_json() const {
  return {{"mAP50", map50},
          {"mAP50_95", map50_95},
          {"precision", precision},
          {"recall", recall},
          {"f1", f1},
          {"confidence", confidence},
          {"ap_per_threshold", ap_per_threshold},
          {"iou_thresholds", kIouLadder},
          {"images", images},
          {"ground_truth", ground_truth},
          {"predictions", predictions},
          {"interpolation", to_string(interpolation)},
          {"pr_curve", {{"iou", 0.5}, {"confidence", curve.confidence}, {"precision", curve.precision},
                        {"recall", curve.recall}}}};
}

DetectionReport DetectionReport::from_json(const nlohmann::json& doc) {
  try {
    DetectionReport r;
    r.map50 = doc.at("mAP50").get<double>();
    r.map50_95 = doc.at("mAP50_95").get<double>();
    r.precision = doc.at("precision").get<double>();
    r.recall = doc.at("recall").get<double>();
    r.f1 = doc.value("f1", 0.0);
    r.confidence = doc.value("confidence", 0.0);
    r.ap_per_threshold = doc.value("ap_per_threshold", std::vector<double>{});
    r.images = doc.value("images", std::size_t{0});
    r.ground_truth = doc.value("ground_truth", std::size_t{0});
    r.predictions = doc.value("predictions", std::size_t{0});
    r.interpolation = parse_interpolation(doc.value("interpolation", std::string("all_point")));
    if (doc.contains("pr_curve")) {
      const auto& c = doc.at("pr_curve");
      r.curve.confidence = c.at("confidence").get<std::vector<double>>();
      r.curve.precision = c.at("precision").get<std::vector<double>>();
      r.curve.recall = c.at("recall").get<std::vector<double>>();
    }
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw InvalidArgument(fmt::format("malformed detection report: {}", e.what()));
  }
}

void DetectionReport::save(const fs::path& path) const {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError(fmt::format("cannot write {}", path.string()));
  out << to_json().dump(2) << '\n';
}

DetectionReport DetectionReport::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError(fmt::format("cannot open {}", path.string()));
  try {
    return from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::parse_error& e) {
    throw IoError(fmt::format("{}: {}", path.string(), e.what()));
  }
}

std::string format_prediction(const Detection& d) {
  return fmt::format("{} 0 {:.6f} {:.6f} {:.6f} {:.6f} {:.6f}", d.image_id, d.confidence, d.box.cx(), d.box.cy(),
                     d.box.width(), d.box.height());
}

void write_predictions(const fs::path& path, std::span<const Detection> predictions) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError(fmt::format("cannot write {}", path.string()));
  for (const auto& d : predictions) {
    if (d.image_id.empty() || d.image_id.find_first_of(" \t\n") != std::string::npos) {
      throw InvalidArgument(fmt::format("image id '{}' must be non-empty without whitespace", d.image_id));
    }
    out << format_prediction(d) << '\n';
  }
}

std::vector<Detection> read_predictions(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError(fmt::format("cannot open predictions {}", path.string()));
  std::vector<Detection> out;
  std::string line;
  for (std::size_t line_no = 1; std::getline(in, line); ++line_no) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream ss(line);
    Detection d;
    int cls = -1;
    double cx, cy, w, h;
    std::string extra;
    if (!(ss >> d.image_id >> cls >> d.confidence >> cx >> cy >> w >> h) || (ss >> extra)) {
      throw IoError(fmt::format("{}:{}: expected 'image_id class confidence cx cy w h'", path.string(), line_no));
    }
    if (cls != 0) throw IoError(fmt::format("{}:{}: class {} (only class 0 exists)", path.string(), line_no, cls));
    if (!(d.confidence >= 0 && d.confidence <= 1)) {
      throw IoError(fmt::format("{}:{}: confidence {} outside [0, 1]", path.string(), line_no, d.confidence));
    }
    d.box = BoundingBox::from_center(cx, cy, w, h);
    if (!d.box.valid(1e-6)) throw IoError(fmt::format("{}:{}: box outside the image or empty", path.string(), line_no));
    out.push_back(std::move(d));
  }
  return out;
}

std::string image_id(const fs::path& image) { return image.stem().string(); }

GroundTruth ground_truth(const imaging::DatasetManifest& manifest, imaging::Split split) {
  GroundTruth gt;
  for (const auto& e : manifest.split(split)) {
    const std::string id = image_id(e.image);
    if (gt.contains(id)) throw InvalidArgument(fmt::format("two images share the id '{}'", id));
    gt[id] = e.label ? imaging::read_labels(*e.label) : std::vector<BoundingBox>{};
  }
  return gt;
}

}  // namespace dropsynth::detect
