#include "dropsynth/fid.hpp"

#include <cmath>
#include <random>

#include <Eigen/Eigenvalues>
#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "dropsynth/error.hpp"
#include "dropsynth/imaging.hpp"
#include "dropsynth/kernels.hpp"
#include "dropsynth/tensor_io.hpp"

namespace dropsynth::fid {

std::string to_string(Variant v) { return v == Variant::standard ? "standard" : "paper_literal"; }

Variant parse_variant(const std::string& text) {
  if (text == "standard") return Variant::standard;
  if (text == "paper_literal") return Variant::paper_literal;
  throw InvalidArgument(fmt::format("unknown FID variant '{}' (expected standard or paper_literal)", text));
}

nlohmann::json FidReport::to_json() const {
  return {{"fid", fid}, {"n_real", n_real}, {"n_fake", n_fake}, {"extractor", extractor_id},
          {"variant", to_string(variant)}};
}

GaussianStats fit_gaussian(const FeatureSet& fs) {
  const Eigen::Index n = fs.features.rows(), d = fs.features.cols();
  if (n < 2) throw InvalidArgument(fmt::format("need at least 2 feature rows for a covariance, got {}", n));
  if (!fs.features.allFinite()) throw InvalidArgument("feature matrix contains non-finite values");
  if (n < d + 1) spdlog::warn("only {} samples for {}-dimensional features; covariance is rank deficient", n, d);
  GaussianStats s;
  s.mu = fs.features.colwise().mean().transpose();
  const Eigen::MatrixXd centered = fs.features.rowwise() - s.mu.transpose();
  const Eigen::MatrixXd cov = (centered.transpose() * centered) / static_cast<double>(n - 1);
  s.sigma = 0.5 * (cov + cov.transpose());
  return s;
}

namespace {

void check_symmetric(const Eigen::MatrixXd& a) {
  if (a.rows() != a.cols()) throw InvalidArgument(fmt::format("matrix is {}x{}, not square", a.rows(), a.cols()));
  const double scale = std::max(1.0, a.cwiseAbs().maxCoeff());
  const double asym = (a - a.transpose()).cwiseAbs().maxCoeff();
  if (asym > 1e-8 * scale) throw InvalidArgument(fmt::format("matrix is not symmetric (max asymmetry {:.3g})", asym));
}

Eigen::VectorXd clamped_eigenvalues(const Eigen::MatrixXd& sym) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(sym, Eigen::EigenvaluesOnly);
  if (es.info() != Eigen::Success) throw Error("eigendecomposition failed to converge");
  return es.eigenvalues().cwiseMax(0.0);
}

}  // namespace

Eigen::MatrixXd sqrtm_psd(const Eigen::MatrixXd& a) {
  check_symmetric(a);
  if (a.size() == 0) return a;
  const Eigen::MatrixXd sym = 0.5 * (a + a.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(sym);
  if (es.info() != Eigen::Success) throw Error("eigendecomposition failed to converge");
  const Eigen::VectorXd root = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * root.asDiagonal() * es.eigenvectors().transpose();
}

double frechet_distance(const GaussianStats& x, const GaussianStats& g, Variant variant) {
  const Eigen::Index d = x.mu.size();
  if (g.mu.size() != d || x.sigma.rows() != d || x.sigma.cols() != d || g.sigma.rows() != d || g.sigma.cols() != d) {
    throw InvalidArgument(fmt::format("feature dimensions differ ({} vs {})", d, g.mu.size()));
  }
  if (x.mu == g.mu && x.sigma == g.sigma) return 0.0;

  const double mean_term = (x.mu - g.mu).squaredNorm();
  const Eigen::MatrixXd sx = sqrtm_psd(x.sigma);
  double cross = 0;
  if (variant == Variant::standard) {
    const Eigen::MatrixXd m = sx * g.sigma * sx;
    cross = clamped_eigenvalues(0.5 * (m + m.transpose())).cwiseSqrt().sum();
  } else {
    cross = (sx * sqrtm_psd(g.sigma)).trace();
  }
  double value = mean_term + x.sigma.trace() + g.sigma.trace() - 2 * cross;
  if (value < 0) {
    if (value < -1e-6) spdlog::warn("Frechet distance came out at {:.3g}; clamping to 0", value);
    value = 0;
  }
  return value;
}

FidReport compute_fid(const FeatureSet& real, const FeatureSet& fake, Variant variant) {
  if (real.extractor_id != fake.extractor_id) {
    throw InvalidArgument(fmt::format("feature sets come from different extractors ({} vs {})", real.extractor_id,
                                      fake.extractor_id));
  }
  FidReport r;
  r.fid = frechet_distance(fit_gaussian(real), fit_gaussian(fake), variant);
  r.n_real = real.count();
  r.n_fake = fake.count();
  r.extractor_id = real.extractor_id;
  r.variant = variant;
  return r;
}

// ---------------------------------------------------------------------------

namespace {

constexpr std::uint64_t kTinySeed = 0x7a1d5eedULL;
constexpr std::size_t kTinyWidths[] = {1, 16, 32, 64};

// Gray (channel mean) at `size` x `size`: area averaging down, bilinear up.
Tensor to_gray_square(const Tensor& images, std::size_t size) {
  const std::size_t n = images.dim(0), c = images.dim(1), h = images.dim(2), w = images.dim(3);
  Tensor gray({n, 1, h, w});
  const std::size_t plane = h * w;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < plane; ++k) {
      Scalar s = 0;
      for (std::size_t ch = 0; ch < c; ++ch) s += images[(i * c + ch) * plane + k];
      gray[i * plane + k] = s / static_cast<Scalar>(c);
    }
  }
  if (h == size && w == size) return gray;
  if (h >= size && w >= size) return kernels::area_resize(gray, size, size);
  return kernels::bilinear_resize(gray, size, size);
}

void add_channel_bias(Tensor& y, const Tensor& b) {
  const std::size_t n = y.dim(0), c = y.dim(1), plane = y.dim(2) * y.dim(3);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < c; ++ch) {
      Scalar* p = y.data() + (i * c + ch) * plane;
      for (std::size_t k = 0; k < plane; ++k) p[k] += b[ch];
    }
}

void check_batch(const Tensor& images) {
  if (images.rank() != 4 || images.dim(0) == 0 || (images.dim(1) != 1 && images.dim(1) != 3)) {
    throw InvalidArgument(fmt::format("expected an N x (1|3) x H x W batch, got {}", shape_string(images.shape())));
  }
}

}  // namespace

TinyEmbedder::TinyEmbedder() {
  std::mt19937_64 rng(kTinySeed);
  for (std::size_t l = 0; l + 1 < std::size(kTinyWidths); ++l) {
    const std::size_t in = kTinyWidths[l], out = kTinyWidths[l + 1];
    weights_.push_back(Tensor::randn({out, in, 3, 3}, rng, std::sqrt(2.0 / static_cast<double>(in * 9))));
    biases_.push_back(Tensor::uniform({out}, rng, -0.1, 0.1));
  }
}

Tensor TinyEmbedder::embed(const Tensor& images) const {
  check_batch(images);
  Tensor x = to_gray_square(images, kInputSize);
  for (std::size_t l = 0; l < weights_.size(); ++l) {
    x = kernels::conv2d(x, weights_[l], kernels::ConvGeometry::same(3));
    add_channel_bias(x, biases_[l]);
    x = kernels::avg_pool2d(kernels::leaky_relu(x, 0.2), 2, 2, 0, true);
  }
  const std::size_t n = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  Tensor out({n, c});
  for (std::size_t i = 0; i < n * c; ++i) {
    Scalar s = 0;
    for (std::size_t k = 0; k < plane; ++k) s += x[i * plane + k];
    out[i] = s / static_cast<Scalar>(plane);
  }
  return out;
}

ExtractorKind parse_extractor(const std::string& text) {
  if (text == "tiny_embedder" || text == "tiny") return ExtractorKind::tiny_embedder;
  if (text == "inception_v3" || text == "inception") return ExtractorKind::inception_v3;
  throw InvalidArgument(fmt::format("unknown extractor '{}' (expected tiny_embedder or inception_v3)", text));
}

std::unique_ptr<FeatureExtractor> make_extractor(ExtractorKind kind, const std::optional<fs::path>& weights) {
  if (kind == ExtractorKind::tiny_embedder) return std::make_unique<TinyEmbedder>();
  return std::make_unique<InceptionV3>(InceptionV3::locate_weights(weights));
}

FeatureSet extract_features(const std::vector<Tensor>& images, const FeatureExtractor& extractor,
                            std::size_t batch_size) {
  if (batch_size == 0) throw InvalidArgument("batch size must be positive");
  FeatureSet fs;
  fs.extractor_id = extractor.id();
  fs.features.resize(static_cast<Eigen::Index>(images.size()), static_cast<Eigen::Index>(extractor.dim()));
  std::size_t i = 0;
  while (i < images.size()) {
    // Batch consecutive images of equal shape.
    const Shape& shape = images[i].shape();
    if (shape.size() != 3) throw InvalidArgument(fmt::format("image {} is not C x H x W", i));
    std::size_t j = i;
    while (j < images.size() && j - i < batch_size && images[j].shape() == shape) ++j;
    const std::size_t per = shape_size(shape);
    Tensor batch({j - i, shape[0], shape[1], shape[2]});
    for (std::size_t k = i; k < j; ++k) std::copy(images[k].data(), images[k].data() + per, batch.data() + (k - i) * per);
    const Tensor emb = extractor.embed(batch);
    for (std::size_t k = i; k < j; ++k)
      for (std::size_t d = 0; d < extractor.dim(); ++d)
        fs.features(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(d)) = emb[(k - i) * extractor.dim() + d];
    i = j;
  }
  if (!fs.features.allFinite()) throw Error("feature extractor produced non-finite values");
  return fs;
}

FeatureSet extract_features(const std::vector<fs::path>& paths, const FeatureExtractor& extractor,
                            std::size_t channels, std::size_t batch_size) {
  FeatureSet out;
  out.extractor_id = extractor.id();
  out.features.resize(static_cast<Eigen::Index>(paths.size()), static_cast<Eigen::Index>(extractor.dim()));
  // Load one batch at a time so large image lists stay out of memory.
  for (std::size_t start = 0; start < paths.size(); start += batch_size) {
    std::vector<Tensor> chunk;
    for (std::size_t k = start; k < std::min(paths.size(), start + batch_size); ++k) {
      chunk.push_back(imaging::load_image(paths[k], channels).pixels);
    }
    const FeatureSet part = extract_features(chunk, extractor, batch_size);
    out.features.middleRows(static_cast<Eigen::Index>(start), part.features.rows()) = part.features;
  }
  return out;
}

namespace {
const ArchiveKind kFeatureKind{"DSFEATS", 1};
}

void save_features(const fs::path& path, const FeatureSet& features) {
  TensorArchive a;
  a.meta = {{"extractor", features.extractor_id}, {"count", features.count()}, {"dim", features.dim()}};
  Tensor t({features.count(), features.dim()});
  for (std::size_t i = 0; i < features.count(); ++i)
    for (std::size_t d = 0; d < features.dim(); ++d)
      t[i * features.dim() + d] = features.features(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(d));
  a.tensors.emplace("features", std::move(t));
  a.save(path, kFeatureKind);
}

FeatureSet load_features(const fs::path& path) {
  const TensorArchive a = TensorArchive::load(path, kFeatureKind);
  const auto it = a.tensors.find("features");
  if (it == a.tensors.end() || it->second.rank() != 2) throw IoError(fmt::format("{}: no feature matrix", path.string()));
  FeatureSet fs;
  fs.extractor_id = a.meta.value("extractor", std::string());
  const Tensor& t = it->second;
  fs.features.resize(static_cast<Eigen::Index>(t.dim(0)), static_cast<Eigen::Index>(t.dim(1)));
  for (std::size_t i = 0; i < t.dim(0); ++i)
    for (std::size_t d = 0; d < t.dim(1); ++d)
      fs.features(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(d)) = t[i * t.dim(1) + d];
  return fs;
}

}  // namespace dropsynth::fid
