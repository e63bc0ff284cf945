#include "dropsynth/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <set>

#include <fmt/format.h>
#include <opencv2/imgproc.hpp>
#include <spdlog/spdlog.h>

#include "dropsynth/error.hpp"

namespace dropsynth::experiment {

using imaging::DatasetManifest;
using imaging::ManifestEntry;
using imaging::Provenance;
using imaging::Split;

namespace {

std::string key_of(const fs::path& p) { return fs::absolute(p).lexically_normal().string(); }

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError(fmt::format("cannot open {}", p.string()));
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint64_t fnv1a(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

void write_json(const fs::path& path, const nlohmann::json& doc) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError(fmt::format("cannot write {}", path.string()));
  out << doc.dump(2) << '\n';
}

nlohmann::json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError(fmt::format("cannot open {}", path.string()));
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw IoError(fmt::format("{}: {}", path.string(), e.what()));
  }
}

std::string shell_quote(const std::string& s) {
  std::string out = "'";
  for (char c : s) {
    if (c == '\'') out += "'\\''";
    else out += c;
  }
  return out + "'";
}

std::string expand(std::string text, const std::map<std::string, std::string>& vars) {
  for (const auto& [k, v] : vars) {
    const std::string token = "{" + k + "}";
    for (std::size_t pos = text.find(token); pos != std::string::npos; pos = text.find(token, pos + v.size())) {
      text.replace(pos, token.size(), v);
    }
  }
  return text;
}

void run_command(const std::string& cmd) {
  spdlog::info("running: {}", cmd);
  const int status = std::system(cmd.c_str());
  if (status != 0) throw Error(fmt::format("command exited with status {}: {}", status, cmd));
}

// Gray H x W view of a C x H x W image.
cv::Mat gray_mat(const Tensor& pixels) {
  const int c = static_cast<int>(pixels.dim(0)), h = static_cast<int>(pixels.dim(1)),
            w = static_cast<int>(pixels.dim(2));
  cv::Mat m(h, w, CV_64F);
  const std::size_t plane = static_cast<std::size_t>(h) * static_cast<std::size_t>(w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double s = 0;
      for (int ch = 0; ch < c; ++ch) s += pixels[static_cast<std::size_t>(ch) * plane + static_cast<std::size_t>(y * w + x)];
      m.at<double>(y, x) = s / c;
    }
  return m;
}

struct Blob {
  int x, y, w, h, area;
  double mean;
};

std::vector<Blob> bright_blobs(const cv::Mat& gray, double threshold) {
  cv::Mat mask = gray > threshold;  // CV_8U
  cv::Mat labels, stats, centroids;
  const int n = cv::connectedComponentsWithStats(mask, labels, stats, centroids, 8, CV_32S);
  std::vector<double> sum(static_cast<std::size_t>(n), 0.0);
  for (int y = 0; y < gray.rows; ++y)
    for (int x = 0; x < gray.cols; ++x) sum[static_cast<std::size_t>(labels.at<int>(y, x))] += gray.at<double>(y, x);
  std::vector<Blob> out;
  for (int i = 1; i < n; ++i) {
    const int area = stats.at<int>(i, cv::CC_STAT_AREA);
    out.push_back({stats.at<int>(i, cv::CC_STAT_LEFT), stats.at<int>(i, cv::CC_STAT_TOP),
                   stats.at<int>(i, cv::CC_STAT_WIDTH), stats.at<int>(i, cv::CC_STAT_HEIGHT), area,
                   sum[static_cast<std::size_t>(i)] / area});
  }
  return out;
}

std::vector<detect::Detection> blobs_to_detections(const std::vector<Blob>& blobs, const StubModel& m, int rows,
                                                   int cols, const std::string& id) {
  std::vector<detect::Detection> out;
  const double image_area = static_cast<double>(rows) * cols;
  for (const Blob& b : blobs) {
    if (b.area / image_area < m.min_area) continue;
    const double px = m.pad * b.w, py = m.pad * b.h;
    BoundingBox box{std::max(0.0, (b.x - px) / cols), std::max(0.0, (b.y - py) / rows),
                    std::min(1.0, (b.x + b.w + px) / cols), std::min(1.0, (b.y + b.h + py) / rows), 0};
    if (!box.valid()) continue;
    const double contrast = std::clamp((b.mean - m.threshold) / std::max(1e-9, 1 - m.threshold), 0.0, 1.0);
    const double fill = std::min(1.0, b.area / (static_cast<double>(b.w) * b.h) / (M_PI / 4));
    out.push_back({id, box, std::clamp(0.6 * contrast + 0.4 * fill, 0.0, 1.0)});
  }
  return out;
}

std::vector<double> config_list(const nlohmann::json& config, const char* key, std::vector<double> fallback) {
  if (config.is_object() && config.contains(key)) return config.at(key).get<std::vector<double>>();
  return fallback;
}

}  // namespace

// ---------------------------------------------------------------------------

nlohmann::json StubModel::to_json() const {
  return {{"kind", "stub"}, {"threshold", threshold}, {"pad", pad}, {"min_area", min_area}, {"channels", channels}};
}

StubModel StubModel::from_json(const nlohmann::json& doc) {
  try {
    if (doc.value("kind", "") != "stub") throw InvalidArgument("not a stub detector model");
    StubModel m;
    m.threshold = doc.at("threshold").get<double>();
    m.pad = doc.at("pad").get<double>();
    m.min_area = doc.at("min_area").get<double>();
    m.channels = doc.value("channels", std::size_t{1});
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw InvalidArgument(fmt::format("malformed stub model: {}", e.what()));
  }
}

void StubModel::save(const fs::path& path) const { write_json(path, to_json()); }
StubModel StubModel::load(const fs::path& path) { return from_json(read_json(path)); }

std::vector<detect::Detection> StubDetector::detect(const StubModel& model, const Tensor& pixels,
                                                    const std::string& id) {
  const cv::Mat g = gray_mat(pixels);
  return blobs_to_detections(bright_blobs(g, model.threshold), model, g.rows, g.cols, id);
}

StubModel StubDetector::fit(const DatasetManifest& manifest, const nlohmann::json& config) {
  std::vector<cv::Mat> images;
  detect::GroundTruth truth;
  std::vector<std::string> ids;
  std::vector<double> areas;
  for (const auto& e : manifest.split(Split::train)) {
    if (!e.label) continue;
    const std::string id = std::to_string(ids.size());
    images.push_back(gray_mat(imaging::load_image(e.image, manifest.channels).pixels));
    truth[id] = imaging::read_labels(*e.label);
    for (const auto& b : truth[id]) areas.push_back(b.area());
    ids.push_back(id);
  }
  if (images.empty()) throw InvalidArgument("the stub detector needs labeled training images");
  if (areas.empty()) throw InvalidArgument("the training labels contain no boxes");

  StubModel best;
  best.channels = manifest.channels;
  std::sort(areas.begin(), areas.end());
  // Components much smaller than the smallest droplets are noise.
  best.min_area = 0.25 * areas[areas.size() / 20];

  std::vector<double> thresholds = config_list(config, "thresholds", {});
  if (thresholds.empty())
    for (int i = -7; i <= 7; ++i) thresholds.push_back(i / 10.0);
  const std::vector<double> pads = config_list(config, "pads", {0.0, 0.05, 0.1, 0.2});

  double best_score = -1;
  for (double t : thresholds) {
    std::vector<std::vector<Blob>> blobs;
    for (const auto& img : images) blobs.push_back(bright_blobs(img, t));
    for (double pad : pads) {
      StubModel m = best;
      m.threshold = t;
      m.pad = pad;
      std::vector<detect::Detection> preds;
      for (std::size_t i = 0; i < images.size(); ++i) {
        auto d = blobs_to_detections(blobs[i], m, images[i].rows, images[i].cols, ids[i]);
        preds.insert(preds.end(), d.begin(), d.end());
      }
      const double score = detect::map_suite(preds, truth).map50_95;
      if (score > best_score) {
        best_score = score;
        best = m;
      }
    }
  }
  spdlog::info("stub detector: threshold {:.2f}, pad {:.2f}, train mAP50-95 {:.4f} on {} images", best.threshold,
               best.pad, best_score, images.size());
  return best;
}

fs::path StubDetector::train(const fs::path& manifest_path, const nlohmann::json& config, const fs::path& work_dir) {
  const StubModel m = fit(DatasetManifest::load(manifest_path), config);
  const fs::path out = work_dir / "stub_model.json";
  m.save(out);
  return out;
}

std::vector<detect::Detection> StubDetector::predict(const fs::path& model, const std::vector<fs::path>& images,
                                                     const fs::path&) {
  const StubModel m = StubModel::load(model);
  std::vector<detect::Detection> out;
  for (const auto& p : images) {
    auto d = detect(m, imaging::load_image(p, m.channels).pixels, detect::image_id(p));
    out.insert(out.end(), d.begin(), d.end());
  }
  return out;
}

// ---------------------------------------------------------------------------

CommandBackend::CommandBackend(std::string train_command, std::string predict_command)
    : train_command_(std::move(train_command)), predict_command_(std::move(predict_command)) {
  if (train_command_.empty() || predict_command_.empty()) {
    throw InvalidArgument("the command backend needs both a train and a predict command");
  }
}

fs::path CommandBackend::train(const fs::path& manifest_path, const nlohmann::json& config, const fs::path& work_dir) {
  fs::create_directories(work_dir);
  const fs::path config_path = work_dir / "backend_config.json";
  write_json(config_path, config);
  const fs::path out = fs::absolute(work_dir / "model");
  run_command(expand(train_command_, {{"manifest", shell_quote(fs::absolute(manifest_path).string())},
                                      {"config", shell_quote(fs::absolute(config_path).string())},
                                      {"out", shell_quote(out.string())}}));
  if (!fs::exists(out)) throw Error(fmt::format("train command did not create {}", out.string()));
  return out;
}

std::vector<detect::Detection> CommandBackend::predict(const fs::path& model, const std::vector<fs::path>& images,
                                                       const fs::path& work_dir) {
  const fs::path dir = fs::absolute(work_dir / "predict_images");
  fs::remove_all(dir);
  fs::create_directories(dir);
  for (const auto& p : images) fs::create_symlink(fs::absolute(p), dir / p.filename());
  const fs::path out = fs::absolute(work_dir / "predictions.txt");
  fs::remove(out);
  run_command(expand(predict_command_, {{"model", shell_quote(fs::absolute(model).string())},
                                        {"images", shell_quote(dir.string())},
                                        {"out", shell_quote(out.string())}}));
  return detect::read_predictions(out);
}

// ---------------------------------------------------------------------------

DatasetManifest synthetic_manifest(const std::vector<fs::path>& images, const std::string& checkpoint_id,
                                   std::size_t resolution, std::size_t channels) {
  DatasetManifest m;
  m.resolution = resolution;
  m.channels = channels;
  m.metadata = {{"checkpoint_id", checkpoint_id}};
  for (const auto& p : images) {
    ManifestEntry e;
    e.image = p;
    e.split = Split::train;
    e.provenance = Provenance::synthetic;
    e.checkpoint_id = checkpoint_id;
    m.entries.push_back(std::move(e));
  }
  m.validate();
  return m;
}

PseudoLabelResult pseudo_label(DetectorBackend& backend, const fs::path& model, const DatasetManifest& synthetic,
                               const PseudoLabelOptions& options, const fs::path& work_dir) {
  if (!(options.confidence_floor >= 0 && options.confidence_floor <= 1)) {
    throw InvalidArgument(fmt::format("confidence floor {} outside [0, 1]", options.confidence_floor));
  }
  if (options.label_dir.empty()) throw InvalidArgument("pseudo-labeling needs a label directory");
  synthetic.validate();
  std::vector<fs::path> images;
  std::set<std::string> ids;
  for (const auto& e : synthetic.entries) {
    if (e.provenance != Provenance::synthetic) {
      throw InvalidArgument(fmt::format("{} is not a synthetic image", e.image.string()));
    }
    if (!ids.insert(detect::image_id(e.image)).second) {
      throw InvalidArgument(fmt::format("two synthetic images share the id '{}'", detect::image_id(e.image)));
    }
    images.push_back(e.image);
  }

  std::vector<detect::Detection> preds;
  try {
    preds = backend.predict(model, images, work_dir);
  } catch (const Error& batch_error) {
    // Find the image that breaks the backend.
    for (const auto& p : images) {
      try {
        backend.predict(model, {p}, work_dir);
      } catch (const Error& e) {
        throw Error(fmt::format("pseudo-labeling {} failed: {}", p.string(), e.what()));
      }
    }
    throw Error(fmt::format("pseudo-labeling failed: {}", batch_error.what()));
  }

  std::map<std::string, std::vector<BoundingBox>> boxes;
  PseudoLabelResult r;
  r.raw_predictions = preds.size();
  for (const auto& d : preds) {
    if (!ids.contains(d.image_id)) throw Error(fmt::format("backend predicted for unknown image '{}'", d.image_id));
    if (d.confidence < options.confidence_floor) continue;
    BoundingBox b{std::clamp(d.box.x0, 0.0, 1.0), std::clamp(d.box.y0, 0.0, 1.0), std::clamp(d.box.x1, 0.0, 1.0),
                  std::clamp(d.box.y1, 0.0, 1.0), 0};
    if (b.valid()) boxes[d.image_id].push_back(b);
  }

  r.manifest = synthetic;
  fs::create_directories(options.label_dir);
  for (auto& e : r.manifest.entries) {
    const std::string id = detect::image_id(e.image);
    const fs::path label = options.label_dir / (id + ".txt");
    imaging::write_labels(boxes[id], label);
    e.label = label;
  }

  nlohmann::json refinement = {{"ran", false}};
  if (options.refine_command) {
    const fs::path manifest_path = work_dir / "pseudo_labeled_manifest.json";
    r.manifest.save(manifest_path);
    run_command(expand(*options.refine_command, {{"labels", shell_quote(fs::absolute(options.label_dir).string())},
                                                 {"manifest", shell_quote(fs::absolute(manifest_path).string())}}));
    refinement = {{"ran", true}, {"command", *options.refine_command}};
    r.refined = true;
  }

  for (auto& e : r.manifest.entries) {
    const std::size_t n = fs::exists(*e.label) ? imaging::read_labels(*e.label).size() : 0;
    if (!fs::exists(*e.label)) imaging::write_labels(std::vector<BoundingBox>{}, *e.label);
    e.flagged_for_review = n == 0;
    r.flagged += n == 0;
    r.box_counts.push_back(n);
    spdlog::debug("{}: {} boxes", e.image.filename().string(), n);
  }
  r.manifest.metadata["pseudo_label"] = {{"backend", backend.name()},
                                         {"model", fs::absolute(model).string()},
                                         {"confidence_floor", options.confidence_floor},
                                         {"raw_predictions", r.raw_predictions},
                                         {"boxes", std::accumulate(r.box_counts.begin(), r.box_counts.end(),
                                                                   std::size_t{0})},
                                         {"flagged_for_review", r.flagged},
                                         {"refinement", refinement}};
  spdlog::info("pseudo-labeled {} images: {} boxes kept of {} predictions, {} flagged for review",
               r.manifest.entries.size(), r.manifest.metadata["pseudo_label"]["boxes"].get<std::size_t>(),
               r.raw_predictions, r.flagged);
  return r;
}

detect::PrecisionRecall label_quality(const DatasetManifest& labeled, const detect::GroundTruth& truth) {
  std::size_t tp = 0, fp = 0, fn = 0;
  for (const auto& e : labeled.entries) {
    const std::string id = detect::image_id(e.image);
    const auto it = truth.find(id);
    if (it == truth.end()) throw InvalidArgument(fmt::format("no reference boxes for '{}'", id));
    std::vector<detect::Detection> preds;
    if (e.label)
      for (const auto& b : imaging::read_labels(*e.label)) preds.push_back({id, b, 1.0});
    const detect::MatchResult m = detect::match(preds, it->second, 0.5);
    tp += m.tp_count();
    fp += m.fp_count();
    fn += m.false_negatives;
  }
  return detect::precision_recall(tp, fp, fn);
}

DatasetManifest build_mix(const DatasetManifest& real, const DatasetManifest& synthetic, std::size_t rung_size,
                          std::uint64_t seed) {
  const std::size_t n_real = real.count(Split::train);
  if (rung_size < n_real) {
    throw InvalidArgument(fmt::format("rung size {} is below the {} real training images", rung_size, n_real));
  }
  std::vector<ManifestEntry> pool;
  for (const auto& e : synthetic.entries)
    if (e.provenance == Provenance::synthetic && e.split == Split::train) pool.push_back(e);
  const std::size_t need = rung_size - n_real;
  if (need > pool.size()) {
    throw InvalidArgument(fmt::format("rung {} needs {} synthetic images but only {} are available (short by {})",
                                      rung_size, need, pool.size(), need - pool.size()));
  }
  std::vector<std::size_t> order(pool.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const double qa = pool[a].quality_score.value_or(-HUGE_VAL), qb = pool[b].quality_score.value_or(-HUGE_VAL);
    return qa > qb;
  });

  DatasetManifest mix = real;
  for (std::size_t i = 0; i < need; ++i) {
    ManifestEntry e = pool[order[i]];
    e.split = Split::train;
    mix.entries.push_back(std::move(e));
  }
  mix.metadata["mix"] = {{"rung_size", rung_size}, {"real", n_real}, {"synthetic", need}, {"seed", seed}};
  mix.validate();
  return mix;
}

// ---------------------------------------------------------------------------

std::string to_string(Metric m) {
  switch (m) {
    case Metric::precision: return "precision";
    case Metric::recall: return "recall";
    case Metric::map50: return "mAP50";
    case Metric::map50_95: return "mAP50_95";
  }
  return "?";
}

double RungMetrics::get(Metric m) const {
  switch (m) {
    case Metric::precision: return precision;
    case Metric::recall: return recall;
    case Metric::map50: return map50;
    case Metric::map50_95: return map50_95;
  }
  return 0;
}

RungMetrics RungMetrics::from(const detect::DetectionReport& r) { return {r.precision, r.recall, r.map50, r.map50_95}; }

nlohmann::json RungMetrics::to_json() const {
  return {{"precision", precision}, {"recall", recall}, {"mAP50", map50}, {"mAP50_95", map50_95}};
}

RungMetrics RungMetrics::from_json(const nlohmann::json& doc) {
  return {doc.at("precision").get<double>(), doc.at("recall").get<double>(), doc.at("mAP50").get<double>(),
          doc.at("mAP50_95").get<double>()};
}

double relative_improvement(double base, double value) {
  if (!(base > 0)) throw InvalidArgument(fmt::format("relative change needs a positive baseline, got {}", base));
  return (value - base) / base;
}

nlohmann::json HygieneReport::to_json() const { return {{"ok", ok()}, {"problems", problems}}; }

HygieneReport check_split_hygiene(const std::vector<DatasetManifest>& rungs) {
  HygieneReport h;
  std::map<std::string, std::uint64_t> hashes;
  const auto content = [&](const fs::path& p) {
    const std::string k = key_of(p);
    auto it = hashes.find(k);
    if (it == hashes.end()) it = hashes.emplace(k, fnv1a(read_file(p))).first;
    return it->second;
  };
  using Fingerprint = std::set<std::pair<std::string, std::uint64_t>>;
  std::optional<Fingerprint> val0, test0;
  std::set<std::string> prev_synthetic;

  for (std::size_t r = 0; r < rungs.size(); ++r) {
    std::map<std::string, Split> where;
    Fingerprint val, test;
    std::set<std::string> synthetic;
    for (const auto& e : rungs[r].entries) {
      const std::string k = key_of(e.image);
      const auto [it, fresh] = where.emplace(k, e.split);
      if (!fresh && it->second != e.split) {
        h.problems.push_back(fmt::format("rung {}: {} is in both {} and {}", r, e.image.string(),
                                         imaging::to_string(it->second), imaging::to_string(e.split)));
      }
      if (e.split == Split::val) val.emplace(k, content(e.image));
      if (e.split == Split::test) test.emplace(k, content(e.image));
      if (e.provenance == Provenance::synthetic) {
        if (e.split != Split::train) h.problems.push_back(fmt::format("rung {}: synthetic {} outside train", r, k));
        synthetic.insert(k);
        if (!e.checkpoint_id || e.checkpoint_id->empty()) {
          h.problems.push_back(fmt::format("rung {}: {} has no checkpoint id", r, k));
        }
        if (!e.label || !fs::exists(*e.label)) h.problems.push_back(fmt::format("rung {}: {} has no label file", r, k));
      }
    }
    if (!val0) {
      val0 = val;
      test0 = test;
    } else {
      if (val != *val0) h.problems.push_back(fmt::format("rung {}: validation split differs from rung 0", r));
      if (test != *test0) h.problems.push_back(fmt::format("rung {}: test split differs from rung 0", r));
    }
    if (!std::includes(synthetic.begin(), synthetic.end(), prev_synthetic.begin(), prev_synthetic.end())) {
      h.problems.push_back(fmt::format("rung {}: synthetic images are not a superset of rung {}", r, r - 1));
    }
    prev_synthetic = std::move(synthetic);
  }
  return h;
}

// ---------------------------------------------------------------------------

bool ExperimentReport::complete() const {
  return !rungs.empty() && hygiene.ok() &&
         std::all_of(rungs.begin(), rungs.end(), [](const RungResult& r) { return r.ok(); });
}

double ExperimentReport::improvement(std::size_t index, Split split, Metric metric) const {
  if (index >= rungs.size()) throw InvalidArgument(fmt::format("no rung {}", index));
  const auto pick = [&](const RungResult& r) -> const RungMetrics& {
    const auto& m = split == Split::test ? r.test : r.val;
    if (split == Split::train || !m) throw InvalidArgument(fmt::format("rung {} has no {} metrics", r.train_size,
                                                                       imaging::to_string(split)));
    return *m;
  };
  return relative_improvement(pick(rungs.front()).get(metric), pick(rungs[index]).get(metric));
}

nlohmann::json ExperimentReport::to_json() const {
  nlohmann::json list = nlohmann::json::array();
  for (std::size_t i = 0; i < rungs.size(); ++i) {
    const RungResult& r = rungs[i];
    nlohmann::json j = {{"train_size", r.train_size}, {"real", r.real}, {"synthetic", r.synthetic}};
    j["val"] = r.val ? r.val->to_json() : nlohmann::json(nullptr);
    j["test"] = r.test ? r.test->to_json() : nlohmann::json(nullptr);
    if (!r.error.empty()) j["error"] = r.error;
    nlohmann::json imp = nlohmann::json::object();
    for (Split s : {Split::val, Split::test}) {
      if (!rungs.front().ok() && !(rungs.front().val && rungs.front().test)) break;
      nlohmann::json per = nlohmann::json::object();
      for (Metric m : {Metric::precision, Metric::recall, Metric::map50, Metric::map50_95}) {
        try {
          per[to_string(m)] = improvement(i, s, m);
        } catch (const InvalidArgument&) {
        }
      }
      if (!per.empty()) imp[imaging::to_string(s)] = per;
    }
    j["improvement"] = imp;
    list.push_back(std::move(j));
  }
  return {{"backend", backend}, {"seed", seed}, {"rungs", list}, {"hygiene", hygiene.to_json()},
          {"complete", complete()}};
}

ExperimentReport ExperimentReport::from_json(const nlohmann::json& doc) {
  try {
    ExperimentReport r;
    r.backend = doc.value("backend", std::string());
    r.seed = doc.value("seed", std::uint64_t{0});
    for (const auto& j : doc.at("rungs")) {
      RungResult row;
      row.train_size = j.at("train_size").get<std::size_t>();
      row.real = j.value("real", std::size_t{0});
      row.synthetic = j.value("synthetic", std::size_t{0});
      if (j.contains("val") && !j["val"].is_null()) row.val = RungMetrics::from_json(j["val"]);
      if (j.contains("test") && !j["test"].is_null()) row.test = RungMetrics::from_json(j["test"]);
      row.error = j.value("error", std::string());
      r.rungs.push_back(std::move(row));
    }
    if (doc.contains("hygiene")) r.hygiene.problems = doc["hygiene"].value("problems", std::vector<std::string>{});
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw InvalidArgument(fmt::format("malformed experiment report: {}", e.what()));
  }
}

void ExperimentReport::save(const fs::path& path) const { write_json(path, to_json()); }
ExperimentReport ExperimentReport::load(const fs::path& path) { return from_json(read_json(path)); }

std::string ExperimentReport::render_table() const {
  std::string out = fmt::format("{:<10} | {:^29} | {:^29} | {:^17}\n", "", "Validation", "Test", "mAP50-95 change");
  out += fmt::format("{:<10} | {:>6} {:>6} {:>6} {:>8} | {:>6} {:>6} {:>6} {:>8} | {:>8} {:>8}\n", "Train", "Pre.",
                     "Rec.", "mAP50", "mAP50-95", "Pre.", "Rec.", "mAP50", "mAP50-95", "val", "test");
  out += std::string(out.size() / 2 - 1, '-') + "\n";
  for (std::size_t i = 0; i < rungs.size(); ++i) {
    const RungResult& r = rungs[i];
    const std::string label = i == 0 ? fmt::format("{} (R)", r.train_size) : std::to_string(r.train_size);
    if (!r.ok()) {
      out += fmt::format("{:<10} | failed: {}\n", label, r.error.empty() ? "missing metrics" : r.error);
      continue;
    }
    const auto cells = [](const RungMetrics& m) {
      return fmt::format("{:>6.3f} {:>6.3f} {:>6.3f} {:>8.3f}", m.precision, m.recall, m.map50, m.map50_95);
    };
    std::string change = fmt::format("{:>8} {:>8}", "", "");
    if (i > 0 && rungs.front().ok()) {
      change = fmt::format("{:>+7.2f}% {:>+7.2f}%", 100 * improvement(i, Split::val, Metric::map50_95),
                           100 * improvement(i, Split::test, Metric::map50_95));
    }
    out += fmt::format("{:<10} | {} | {} | {}\n", label, cells(*r.val), cells(*r.test), change);
  }
  if (!hygiene.ok()) {
    for (const auto& p : hygiene.problems) out += fmt::format("hygiene: {}\n", p);
  }
  return out;
}

ExperimentReport run_ladder(DetectorBackend& backend, const DatasetManifest& real, const DatasetManifest& synthetic,
                            const LadderOptions& options) {
  if (options.rungs.empty()) throw InvalidArgument("the ladder needs at least one rung");
  for (std::size_t i = 1; i < options.rungs.size(); ++i) {
    if (options.rungs[i] <= options.rungs[i - 1]) throw InvalidArgument("ladder rungs must be strictly increasing");
  }
  const std::size_t n_real = real.count(Split::train);
  if (options.rungs.front() != n_real) {
    throw InvalidArgument(fmt::format("the first rung must be the real-only training set ({} images), got {}", n_real,
                                      options.rungs.front()));
  }
  if (options.work_dir.empty()) throw InvalidArgument("the ladder needs a work directory");

  ExperimentReport report;
  report.backend = backend.name();
  report.seed = options.seed;
  std::vector<DatasetManifest> built;
  for (std::size_t size : options.rungs) {
    RungResult row;
    row.train_size = size;
    row.real = n_real;
    row.synthetic = size - n_real;
    const fs::path dir = options.work_dir / fmt::format("rung_{:05d}", size);
    try {
      fs::create_directories(dir);
      const DatasetManifest mix = build_mix(real, synthetic, size, options.seed);
      built.push_back(mix);
      const fs::path manifest_path = dir / "manifest.json";
      mix.save(manifest_path);
      spdlog::info("rung {}: {} real + {} synthetic", size, row.real, row.synthetic);
      const fs::path model = backend.train(manifest_path, options.backend_config, dir);
      for (Split split : {Split::val, Split::test}) {
        const detect::GroundTruth truth = detect::ground_truth(mix, split);
        std::vector<fs::path> images;
        for (const auto& e : mix.split(split)) images.push_back(e.image);
        const auto preds = backend.predict(model, images, dir);
        const detect::DetectionReport rep = detect::map_suite(preds, truth, options.interpolation);
        rep.save(dir / fmt::format("{}_report.json", imaging::to_string(split)));
        detect::write_predictions(dir / fmt::format("{}_predictions.txt", imaging::to_string(split)), preds);
        (split == Split::val ? row.val : row.test) = RungMetrics::from(rep);
      }
    } catch (const Error& e) {
      row.error = e.what();
      spdlog::error("rung {} failed: {}", size, e.what());
    }
    report.rungs.push_back(std::move(row));
  }
  report.hygiene = check_split_hygiene(built);
  for (const auto& p : report.hygiene.problems) spdlog::error("split hygiene: {}", p);
  return report;
}

// ---------------------------------------------------------------------------

std::vector<double> quality_rank(const fid::FeatureSet& candidates, const fid::GaussianStats& reference,
                                 std::size_t window) {
  if (window < 2) throw InvalidArgument(fmt::format("quality window must be at least 2, got {}", window));
  const std::size_t n = candidates.count();
  if (n < 2) throw InvalidArgument("quality ranking needs at least 2 candidates");
  if (candidates.dim() != static_cast<std::size_t>(reference.mu.size())) {
    throw InvalidArgument(fmt::format("candidate features have {} dimensions, reference has {}", candidates.dim(),
                                      reference.mu.size()));
  }
  const std::size_t w = std::min(window, n);
  const auto window_fid = [&](std::size_t start) {
    Eigen::MatrixXd rows(static_cast<Eigen::Index>(w), candidates.features.cols());
    for (std::size_t j = 0; j < w; ++j)
      rows.row(static_cast<Eigen::Index>(j)) = candidates.features.row(static_cast<Eigen::Index>((start + j) % n));
    fid::GaussianStats s;
    s.mu = rows.colwise().mean().transpose();
    const Eigen::MatrixXd c = rows.rowwise() - s.mu.transpose();
    const Eigen::MatrixXd cov = c.transpose() * c / static_cast<double>(w - 1);
    s.sigma = 0.5 * (cov + cov.transpose());
    return fid::frechet_distance(reference, s);
  };
  std::vector<double> per_window(n);
  if (w == n) {
    std::fill(per_window.begin(), per_window.end(), window_fid(0));
  } else {
    for (std::size_t s = 0; s < n; ++s) per_window[s] = window_fid(s);
  }
  std::vector<double> scores(n);
  for (std::size_t i = 0; i < n; ++i) {
    double sum = 0;
    for (std::size_t k = 0; k < w; ++k) sum += per_window[(i + n - k) % n];
    scores[i] = -sum / static_cast<double>(w);
  }
  return scores;
}

std::vector<std::size_t> select_top(const std::vector<double>& scores, std::size_t k) {
  if (k > scores.size()) {
    throw InvalidArgument(fmt::format("cannot select {} of {} candidates", k, scores.size()));
  }
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  order.resize(k);
  return order;
}

}  // namespace dropsynth::experiment
