#pragma once

// Frechet distance between Gaussians fit to image embeddings.

#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "dropsynth/tensor.hpp"

namespace dropsynth::fid {

namespace fs = std::filesystem;

struct FeatureSet {
  Eigen::MatrixXd features;  // N x D, one row per image
  std::string extractor_id;

  std::size_t count() const { return static_cast<std::size_t>(features.rows()); }
  std::size_t dim() const { return static_cast<std::size_t>(features.cols()); }
};

struct GaussianStats {
  Eigen::VectorXd mu;
  Eigen::MatrixXd sigma;
};

enum class Variant { standard, paper_literal };
std::string to_string(Variant v);
Variant parse_variant(const std::string& text);

struct FidReport {
  double fid = 0;
  std::size_t n_real = 0;
  std::size_t n_fake = 0;
  std::string extractor_id;
  Variant variant = Variant::standard;

  nlohmann::json to_json() const;
};

// Column mean and unbiased covariance, symmetrized. Needs N >= 2.
GaussianStats fit_gaussian(const FeatureSet& features);

// V diag(sqrt(max(lambda, 0))) V^T. Throws on asymmetry beyond
// 1e-8 * max(1, max |A|).
Eigen::MatrixXd sqrtm_psd(const Eigen::MatrixXd& a);

// standard:      |mu_x - mu_g|^2 + Tr(Sx + Sg - 2 sqrt(sqrt(Sx) Sg sqrt(Sx)))
// paper_literal: |mu_x - mu_g|^2 + Tr(Sx + Sg - 2 sqrt(Sx) sqrt(Sg))
double frechet_distance(const GaussianStats& x, const GaussianStats& g, Variant variant = Variant::standard);

FidReport compute_fid(const FeatureSet& real, const FeatureSet& fake, Variant variant = Variant::standard);

// ---------------------------------------------------------------------------
// Feature extractors. Inputs are N x C x H x W batches in [-1, 1], C = 1 or 3.

class FeatureExtractor {
 public:
  virtual ~FeatureExtractor() = default;
  virtual std::string id() const = 0;
  virtual std::size_t dim() const = 0;
  // N x dim.
  virtual Tensor embed(const Tensor& images) const = 0;
};

// Small random-convolution encoder with fixed weights (D = 64). Needs no
// downloads; meant for desk-scale comparisons.
class TinyEmbedder : public FeatureExtractor {
 public:
  static constexpr std::size_t kInputSize = 64;
  static constexpr std::size_t kDim = 64;

  TinyEmbedder();
  std::string id() const override { return "tiny_embedder"; }
  std::size_t dim() const override { return kDim; }
  Tensor embed(const Tensor& images) const override;

 private:
  std::vector<Tensor> weights_;
  std::vector<Tensor> biases_;
};

// Inception V3 (torchvision layout) pool features, D = 2048. Weights come
// from a tensor archive written by tools/export_inception.py.
class InceptionV3 : public FeatureExtractor {
 public:
  static constexpr std::size_t kInputSize = 299;
  static constexpr std::size_t kDim = 2048;
  static constexpr const char* kWeightsEnv = "DROPSYNTH_INCEPTION_WEIGHTS";

  explicit InceptionV3(const fs::path& weights);
  std::string id() const override { return "inception_v3"; }
  std::size_t dim() const override { return kDim; }
  Tensor embed(const Tensor& images) const override;
  // Skips resizing: `images` must already be N x 3 x H x W in [-1, 1].
  Tensor embed_prepared(const Tensor& images) const;

  // The explicit path if given, else $DROPSYNTH_INCEPTION_WEIGHTS. Throws
  // with a hint to use tiny_embedder when neither points at a file.
  static fs::path locate_weights(const std::optional<fs::path>& explicit_path);

 private:
  struct Conv {
    Tensor w, b;  // batch norm folded in
    std::size_t stride = 1, pad_h = 0, pad_w = 0;
  };
  Tensor conv(const std::string& name, const Tensor& x) const;
  Tensor mixed_a(const std::string& name, const Tensor& x) const;
  Tensor mixed_b(const std::string& name, const Tensor& x) const;
  Tensor mixed_c(const std::string& name, const Tensor& x) const;
  Tensor mixed_d(const std::string& name, const Tensor& x) const;
  Tensor mixed_e(const std::string& name, const Tensor& x) const;

  std::map<std::string, Conv> convs_;
};

enum class ExtractorKind { tiny_embedder, inception_v3 };
ExtractorKind parse_extractor(const std::string& text);

std::unique_ptr<FeatureExtractor> make_extractor(ExtractorKind kind,
                                                 const std::optional<fs::path>& weights = std::nullopt);

// Embeds images in batches. Images may differ in size.
FeatureSet extract_features(const std::vector<Tensor>& images, const FeatureExtractor& extractor,
                            std::size_t batch_size = 16);
FeatureSet extract_features(const std::vector<fs::path>& images, const FeatureExtractor& extractor,
                            std::size_t channels = 1, std::size_t batch_size = 16);

// Feature cache: a tensor archive holding the N x D matrix and extractor id.
void save_features(const fs::path& path, const FeatureSet& features);
FeatureSet load_features(const fs::path& path);

}  // namespace dropsynth::fid
