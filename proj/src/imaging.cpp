#include "dropsynth/imaging.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include <fmt/format.h>
#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>
#include <spdlog/spdlog.h>

#include "dropsynth/error.hpp"
#include "dropsynth/kernels.hpp"

namespace dropsynth::imaging {

namespace {

constexpr int kManifestVersion = 1;

const std::set<std::string> kImageExtensions = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"};

bool is_image_file(const fs::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return kImageExtensions.contains(ext);
}

std::string stored_path(const fs::path& p, const fs::path& base_dir) {
  if (base_dir.empty()) return p.generic_string();
  const fs::path abs = fs::absolute(p).lexically_normal();
  const fs::path base = fs::absolute(base_dir).lexically_normal();
  const fs::path rel = abs.lexically_relative(base);
  if (!rel.empty() && *rel.begin() != "..") return rel.generic_string();
  return abs.generic_string();
}

fs::path resolved_path(const std::string& stored, const fs::path& base_dir) {
  fs::path p(stored);
  if (p.is_relative() && !base_dir.empty()) p = base_dir / p;
  return p.lexically_normal();
}

Tensor mat_to_tensor(const cv::Mat& mat, std::size_t channels) {
  const auto h = static_cast<std::size_t>(mat.rows);
  const auto w = static_cast<std::size_t>(mat.cols);
  Tensor t({channels, h, w});
  for (std::size_t y = 0; y < h; ++y) {
    const auto* row = mat.ptr<std::uint8_t>(static_cast<int>(y));
    for (std::size_t x = 0; x < w; ++x) {
      for (std::size_t c = 0; c < channels; ++c) {
        // OpenCV stores BGR; planes are RGB.
        const std::size_t src_c = channels == 3 ? 2 - c : c;
        t[(c * h + y) * w + x] = row[x * channels + src_c] / 127.5 - 1.0;
      }
    }
  }
  return t;
}

BoundingBox parse_label_line(const std::string& line, std::size_t line_no, const fs::path& path) {
  std::istringstream in(line);
  int cls = -1;
  double cx, cy, w, h;
  std::string extra;
  if (!(in >> cls >> cx >> cy >> w >> h) || (in >> extra)) {
    throw IoError(fmt::format("{}:{}: malformed label line '{}'", path.string(), line_no, line));
  }
  if (cls != 0) throw IoError(fmt::format("{}:{}: class {} is not the droplet class 0", path.string(), line_no, cls));
  for (double v : {cx, cy, w, h}) {
    if (!std::isfinite(v) || v < 0 || v > 1) {
      throw IoError(fmt::format("{}:{}: coordinate {} outside [0, 1]", path.string(), line_no, v));
    }
  }
  BoundingBox box = BoundingBox::from_center(cx, cy, w, h);
  if (!box.valid(1e-6)) {
    throw IoError(fmt::format("{}:{}: box extends outside the image or has zero area", path.string(), line_no));
  }
  box.x0 = std::max(0.0, box.x0);
  box.y0 = std::max(0.0, box.y0);
  box.x1 = std::min(1.0, box.x1);
  box.y1 = std::min(1.0, box.y1);
  return box;
}

// Maps a label box from the original frame into the center-cropped square.
std::optional<BoundingBox> crop_box(const BoundingBox& box, std::size_t w, std::size_t h) {
  const double side = static_cast<double>(std::min(w, h));
  const double ox = (static_cast<double>(w) - side) / 2;
  const double oy = (static_cast<double>(h) - side) / 2;
  BoundingBox out{(box.x0 * w - ox) / side, (box.y0 * h - oy) / side, (box.x1 * w - ox) / side,
                  (box.y1 * h - oy) / side, 0};
  out.x0 = std::clamp(out.x0, 0.0, 1.0);
  out.y0 = std::clamp(out.y0, 0.0, 1.0);
  out.x1 = std::clamp(out.x1, 0.0, 1.0);
  out.y1 = std::clamp(out.y1, 0.0, 1.0);
  if (out.x1 - out.x0 <= 0 || out.y1 - out.y0 <= 0) return std::nullopt;
  return out;
}

std::optional<fs::path> find_label_for(const fs::path& image) {
  const fs::path stem = image.stem();
  for (const fs::path& candidate :
       {image.parent_path() / (stem.string() + ".txt"), image.parent_path() / "labels" / (stem.string() + ".txt")}) {
    if (fs::exists(candidate)) return candidate;
  }
  return std::nullopt;
}

}  // namespace

std::string to_string(Split split) {
  switch (split) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "train";
}

std::string to_string(Provenance provenance) { return provenance == Provenance::real ? "real" : "synthetic"; }

Split parse_split(const std::string& text) {
  if (text == "train") return Split::train;
  if (text == "val") return Split::val;
  if (text == "test") return Split::test;
  throw InvalidArgument(fmt::format("unknown split '{}'", text));
}

Provenance parse_provenance(const std::string& text) {
  if (text == "real") return Provenance::real;
  if (text == "synthetic") return Provenance::synthetic;
  throw InvalidArgument(fmt::format("unknown provenance '{}'", text));
}

ImageRecord load_image(const fs::path& path, std::size_t channels) {
  if (channels != 1 && channels != 3) throw InvalidArgument(fmt::format("channels must be 1 or 3, got {}", channels));
  cv::Mat mat = cv::imread(path.string(), channels == 1 ? cv::IMREAD_GRAYSCALE : cv::IMREAD_COLOR);
  if (mat.empty()) throw IoError(fmt::format("cannot decode image {}", path.string()));
  ImageRecord record;
  record.path = path;
  record.pixels = mat_to_tensor(mat, channels);
  record.source_resolution = static_cast<std::size_t>(std::max(mat.rows, mat.cols));
  return record;
}

std::uint8_t to_byte(Scalar value) {
  const Scalar clamped = std::clamp<Scalar>(value, -1, 1);
  return static_cast<std::uint8_t>(std::lround((clamped + 1) * 127.5));
}

void save_image(const fs::path& path, const Tensor& pixels) {
  if (pixels.rank() != 3 || (pixels.dim(0) != 1 && pixels.dim(0) != 3)) {
    throw InvalidArgument(fmt::format("save_image expects 1xHxW or 3xHxW, got {}", shape_string(pixels.shape())));
  }
  const std::size_t c = pixels.dim(0), h = pixels.dim(1), w = pixels.dim(2);
  cv::Mat mat(static_cast<int>(h), static_cast<int>(w), c == 1 ? CV_8UC1 : CV_8UC3);
  for (std::size_t y = 0; y < h; ++y) {
    auto* row = mat.ptr<std::uint8_t>(static_cast<int>(y));
    for (std::size_t x = 0; x < w; ++x) {
      for (std::size_t ch = 0; ch < c; ++ch) {
        const std::size_t src_c = c == 3 ? 2 - ch : ch;
        row[x * c + ch] = to_byte(pixels[(src_c * h + y) * w + x]);
      }
    }
  }
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  if (!cv::imwrite(path.string(), mat, {cv::IMWRITE_PNG_COMPRESSION, 6})) {
    throw IoError(fmt::format("cannot write image {}", path.string()));
  }
}

// ---------------------------------------------------------------------------

ResolutionLadder::ResolutionLadder(int max_stage) : max_stage_(max_stage) {
  if (max_stage < 1 || max_stage > kMaxLadderStage) {
    throw InvalidArgument(fmt::format("ladder max stage must be in 1..{}, got {}", kMaxLadderStage, max_stage));
  }
}

std::size_t ResolutionLadder::resolution_of(int stage) {
  if (stage < 1 || stage > kMaxLadderStage) {
    throw InvalidArgument(fmt::format("stage {} outside 1..{}", stage, kMaxLadderStage));
  }
  return std::size_t{1} << (stage + 1);
}

std::vector<StageSpec> ResolutionLadder::stages() const {
  std::vector<StageSpec> out;
  for (int i = 1; i <= max_stage_; ++i) out.push_back({i, resolution_of(i)});
  return out;
}

std::vector<Tensor> image_pyramid(const ImageRecord& record, const ResolutionLadder& ladder) {
  const Tensor& px = record.pixels;
  if (px.rank() != 3 || px.dim(1) != px.dim(2)) {
    throw InvalidArgument(fmt::format("image_pyramid expects a square C x R x R image, got {}",
                                      shape_string(px.shape())));
  }
  const std::size_t r = px.dim(1);
  for (const StageSpec& s : ladder.stages()) {
    if (s.resolution > r) {
      throw InvalidArgument(fmt::format("image {} is {}x{}, smaller than stage {} ({}x{})", record.path.string(), r,
                                        r, s.index, s.resolution, s.resolution));
    }
  }
  const Tensor batch = px.reshaped({1, px.dim(0), r, r});
  std::vector<Tensor> levels;
  for (const StageSpec& s : ladder.stages()) {
    Tensor level = s.resolution == r ? batch : kernels::area_resize(batch, s.resolution, s.resolution);
    levels.push_back(std::move(level).reshaped({px.dim(0), s.resolution, s.resolution}));
  }
  return levels;
}

// ---------------------------------------------------------------------------

std::vector<ManifestEntry> DatasetManifest::split(Split which) const {
  std::vector<ManifestEntry> out;
  for (const auto& e : entries) {
    if (e.split == which) out.push_back(e);
  }
  return out;
}

std::size_t DatasetManifest::count(Split which) const {
  return static_cast<std::size_t>(
      std::count_if(entries.begin(), entries.end(), [which](const ManifestEntry& e) { return e.split == which; }));
}

void DatasetManifest::validate() const {
  std::set<std::string> seen;
  for (const auto& e : entries) {
    const std::string key = fs::absolute(e.image).lexically_normal().string();
    if (!seen.insert(key).second) throw InvalidArgument(fmt::format("duplicate image path {}", e.image.string()));
    if (e.provenance == Provenance::synthetic && (!e.checkpoint_id || e.checkpoint_id->empty())) {
      throw InvalidArgument(fmt::format("synthetic entry {} does not name its checkpoint", e.image.string()));
    }
  }
}

nlohmann::json DatasetManifest::to_json(const fs::path& base_dir) const {
  nlohmann::json doc;
  doc["format"] = "dropsynth-manifest";
  doc["version"] = kManifestVersion;
  doc["seed"] = seed;
  doc["channels"] = channels;
  doc["resolution"] = resolution;
  doc["split_sizes"] = {{"train", count(Split::train)}, {"val", count(Split::val)}, {"test", count(Split::test)}};
  doc["metadata"] = metadata;
  nlohmann::json list = nlohmann::json::array();
  for (const auto& e : entries) {
    nlohmann::json j;
    j["image"] = stored_path(e.image, base_dir);
    j["label"] = e.label ? nlohmann::json(stored_path(*e.label, base_dir)) : nlohmann::json(nullptr);
    j["split"] = to_string(e.split);
    j["provenance"] = to_string(e.provenance);
    j["checkpoint_id"] = e.checkpoint_id ? nlohmann::json(*e.checkpoint_id) : nlohmann::json(nullptr);
    j["quality_score"] = e.quality_score ? nlohmann::json(*e.quality_score) : nlohmann::json(nullptr);
    j["flagged_for_review"] = e.flagged_for_review;
    list.push_back(std::move(j));
  }
  doc["entries"] = std::move(list);
  return doc;
}

DatasetManifest DatasetManifest::from_json(const nlohmann::json& doc, const fs::path& base_dir) {
  try {
    if (doc.value("format", "") != "dropsynth-manifest") throw IoError("not a dropsynth manifest");
    if (doc.at("version").get<int>() != kManifestVersion) {
      throw IoError(fmt::format("unsupported manifest version {}", doc.at("version").dump()));
    }
    DatasetManifest m;
    m.seed = doc.at("seed").get<std::uint64_t>();
    m.channels = doc.at("channels").get<std::size_t>();
    m.resolution = doc.at("resolution").get<std::size_t>();
    m.metadata = doc.value("metadata", nlohmann::json::object());
    for (const auto& j : doc.at("entries")) {
      ManifestEntry e;
      e.image = resolved_path(j.at("image").get<std::string>(), base_dir);
      if (!j.at("label").is_null()) e.label = resolved_path(j.at("label").get<std::string>(), base_dir);
      e.split = parse_split(j.at("split").get<std::string>());
      e.provenance = parse_provenance(j.at("provenance").get<std::string>());
      if (j.contains("checkpoint_id") && !j["checkpoint_id"].is_null()) e.checkpoint_id = j["checkpoint_id"];
      if (j.contains("quality_score") && !j["quality_score"].is_null()) e.quality_score = j["quality_score"];
      e.flagged_for_review = j.value("flagged_for_review", false);
      m.entries.push_back(std::move(e));
    }
    m.validate();
    return m;
  } catch (const nlohmann::json::exception& ex) {
    throw IoError(fmt::format("malformed manifest: {}", ex.what()));
  }
}

void DatasetManifest::save(const fs::path& path) const {
  validate();
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError(fmt::format("cannot write manifest {}", path.string()));
  out << to_json(path.parent_path()).dump(2) << '\n';
}

DatasetManifest DatasetManifest::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError(fmt::format("cannot open manifest {}", path.string()));
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception& ex) {
    throw IoError(fmt::format("{}: {}", path.string(), ex.what()));
  }
  return from_json(doc, path.parent_path());
}

std::array<std::size_t, 3> split_counts(std::size_t total, const std::array<double, 3>& ratios) {
  const double sum = ratios[0] + ratios[1] + ratios[2];
  if (std::abs(sum - 1.0) > 1e-9) throw InvalidArgument(fmt::format("split ratios sum to {}, expected 1", sum));
  for (double r : ratios) {
    if (r < 0) throw InvalidArgument("split ratios must be non-negative");
  }
  std::array<std::size_t, 3> counts{};
  std::array<double, 3> remainder{};
  std::size_t assigned = 0;
  for (int i = 0; i < 3; ++i) {
    const double exact = ratios[i] * static_cast<double>(total);
    counts[i] = static_cast<std::size_t>(std::floor(exact));
    remainder[i] = exact - std::floor(exact);
    assigned += counts[i];
  }
  std::array<int, 3> order{0, 1, 2};
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return remainder[a] > remainder[b]; });
  for (std::size_t k = 0; assigned < total; ++k, ++assigned) ++counts[order[k % 3]];
  return counts;
}

Tensor crop_and_resize(const Tensor& pixels, std::size_t target) {
  const std::size_t c = pixels.dim(0), h = pixels.dim(1), w = pixels.dim(2);
  const std::size_t side = std::min(h, w);
  const std::size_t oy = (h - side) / 2, ox = (w - side) / 2;
  Tensor square({1, c, side, side});
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < side; ++y)
      for (std::size_t x = 0; x < side; ++x) square.at(0, ch, y, x) = pixels[(ch * h + y + oy) * w + x + ox];
  Tensor resized = side == target ? std::move(square)
                   : side > target ? kernels::area_resize(square, target, target)
                                   : kernels::bilinear_resize(square, target, target);
  for (auto& v : resized.values()) v = std::clamp<Scalar>(v, -1, 1);
  return std::move(resized).reshaped({c, target, target});
}

DatasetManifest prepare_dataset(const fs::path& source_dir, const fs::path& out_dir, const PrepareOptions& options) {
  if (!fs::is_directory(source_dir)) {
    throw IoError(fmt::format("source directory {} does not exist", source_dir.string()));
  }
  if (options.target_resolution == 0) throw InvalidArgument("target resolution must be positive");
  std::vector<fs::path> files;
  for (const auto& item : fs::directory_iterator(source_dir)) {
    if (item.is_regular_file() && is_image_file(item.path())) files.push_back(item.path());
  }
  if (files.empty()) throw IoError(fmt::format("no images found in {}", source_dir.string()));
  std::sort(files.begin(), files.end());

  struct Decoded {
    fs::path source;
    Tensor pixels;
    std::optional<std::vector<BoundingBox>> boxes;
  };
  std::vector<Decoded> decoded;
  for (const auto& f : files) {
    try {
      ImageRecord rec = load_image(f, options.channels);
      Decoded d{f, crop_and_resize(rec.pixels, options.target_resolution), std::nullopt};
      if (auto label = find_label_for(f)) {
        std::vector<BoundingBox> boxes;
        for (const auto& b : read_labels(*label)) {
          if (auto cropped = crop_box(b, rec.width(), rec.height())) boxes.push_back(*cropped);
        }
        d.boxes = std::move(boxes);
      }
      decoded.push_back(std::move(d));
    } catch (const Error& e) {
      spdlog::warn("skipping {}: {}", f.string(), e.what());
    }
  }
  if (decoded.empty()) throw IoError(fmt::format("no decodable images in {}", source_dir.string()));

  std::vector<std::size_t> order(decoded.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(options.seed);
  std::shuffle(order.begin(), order.end(), rng);
  const auto counts = split_counts(decoded.size(), options.split_ratios);

  DatasetManifest manifest;
  manifest.seed = options.seed;
  manifest.channels = options.channels;
  manifest.resolution = options.target_resolution;
  manifest.metadata = {{"source_dir", fs::absolute(source_dir).string()},
                       {"split_ratios", options.split_ratios},
                       {"excluded", files.size() - decoded.size()}};

  std::set<std::string> used_names;
  std::size_t position = 0;
  for (int s = 0; s < 3; ++s) {
    const Split split = static_cast<Split>(s);
    for (std::size_t k = 0; k < counts[s]; ++k, ++position) {
      const Decoded& d = decoded[order[position]];
      std::string name = d.source.stem().string();
      for (int suffix = 1; !used_names.insert(name).second; ++suffix) {
        name = fmt::format("{}_{}", d.source.stem().string(), suffix);
      }
      ManifestEntry e;
      e.image = out_dir / "images" / to_string(split) / (name + ".png");
      e.split = split;
      save_image(e.image, d.pixels);
      if (d.boxes) {
        e.label = out_dir / "labels" / to_string(split) / (name + ".txt");
        write_labels(*d.boxes, *e.label);
      }
      manifest.entries.push_back(std::move(e));
    }
  }
  manifest.save(out_dir / "manifest.json");
  return manifest;
}

// ---------------------------------------------------------------------------

std::string format_label_line(const BoundingBox& box) {
  return fmt::format("0 {:.6f} {:.6f} {:.6f} {:.6f}", box.cx(), box.cy(), box.width(), box.height());
}

void write_labels(std::span<const PixelBox> boxes, std::size_t image_size, const fs::path& path) {
  if (image_size == 0) throw InvalidArgument("image size must be positive");
  std::vector<BoundingBox> normalized;
  normalized.reserve(boxes.size());
  for (const auto& b : boxes) normalized.push_back(b.normalized(static_cast<double>(image_size)));
  write_labels(normalized, path);
}

void write_labels(std::span<const BoundingBox> boxes, const fs::path& path) {
  for (const auto& b : boxes) {
    if (!b.valid(1e-9)) {
      throw InvalidArgument(fmt::format("box ({}, {}, {}, {}) is outside the image or empty", b.x0, b.y0, b.x1, b.y1));
    }
  }
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError(fmt::format("cannot write labels {}", path.string()));
  for (const auto& b : boxes) out << format_label_line(b) << '\n';
}

std::vector<BoundingBox> read_labels(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError(fmt::format("cannot open labels {}", path.string()));
  std::vector<BoundingBox> boxes;
  std::string line;
  for (std::size_t line_no = 1; std::getline(in, line); ++line_no) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    boxes.push_back(parse_label_line(line, line_no, path));
  }
  return boxes;
}

}  // namespace dropsynth::imaging
