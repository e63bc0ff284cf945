#include <cmath>
#include <cstdlib>

#include <fmt/format.h>

#include "dropsynth/error.hpp"
#include "dropsynth/fid.hpp"
#include "dropsynth/kernels.hpp"
#include "dropsynth/tensor_io.hpp"

namespace dropsynth::fid {

namespace {

const ArchiveKind kWeightsKind{"DSWEIGHT", 1};
constexpr Scalar kBatchNormEps = 1e-3;

struct ConvSpec {
  const char* name;
  std::size_t stride, pad_h, pad_w;
};

// Every BasicConv2d of the torchvision network with its stride and padding.
const ConvSpec kConvs[] = {
    {"Conv2d_1a_3x3", 2, 0, 0}, {"Conv2d_2a_3x3", 1, 0, 0}, {"Conv2d_2b_3x3", 1, 1, 1},
    {"Conv2d_3b_1x1", 1, 0, 0}, {"Conv2d_4a_3x3", 1, 0, 0},
    // InceptionA
    {"Mixed_5b.branch1x1", 1, 0, 0}, {"Mixed_5b.branch5x5_1", 1, 0, 0}, {"Mixed_5b.branch5x5_2", 1, 2, 2},
    {"Mixed_5b.branch3x3dbl_1", 1, 0, 0}, {"Mixed_5b.branch3x3dbl_2", 1, 1, 1},
    {"Mixed_5b.branch3x3dbl_3", 1, 1, 1}, {"Mixed_5b.branch_pool", 1, 0, 0},
    {"Mixed_5c.branch1x1", 1, 0, 0}, {"Mixed_5c.branch5x5_1", 1, 0, 0}, {"Mixed_5c.branch5x5_2", 1, 2, 2},
    {"Mixed_5c.branch3x3dbl_1", 1, 0, 0}, {"Mixed_5c.branch3x3dbl_2", 1, 1, 1},
    {"Mixed_5c.branch3x3dbl_3", 1, 1, 1}, {"Mixed_5c.branch_pool", 1, 0, 0},
    {"Mixed_5d.branch1x1", 1, 0, 0}, {"Mixed_5d.branch5x5_1", 1, 0, 0}, {"Mixed_5d.branch5x5_2", 1, 2, 2},
    {"Mixed_5d.branch3x3dbl_1", 1, 0, 0}, {"Mixed_5d.branch3x3dbl_2", 1, 1, 1},
    {"Mixed_5d.branch3x3dbl_3", 1, 1, 1}, {"Mixed_5d.branch_pool", 1, 0, 0},
    // InceptionB
    {"Mixed_6a.branch3x3", 2, 0, 0}, {"Mixed_6a.branch3x3dbl_1", 1, 0, 0}, {"Mixed_6a.branch3x3dbl_2", 1, 1, 1},
    {"Mixed_6a.branch3x3dbl_3", 2, 0, 0},
    // InceptionC x4
    {"Mixed_6b.branch1x1", 1, 0, 0}, {"Mixed_6b.branch7x7_1", 1, 0, 0}, {"Mixed_6b.branch7x7_2", 1, 0, 3},
    {"Mixed_6b.branch7x7_3", 1, 3, 0}, {"Mixed_6b.branch7x7dbl_1", 1, 0, 0}, {"Mixed_6b.branch7x7dbl_2", 1, 3, 0},
    {"Mixed_6b.branch7x7dbl_3", 1, 0, 3}, {"Mixed_6b.branch7x7dbl_4", 1, 3, 0}, {"Mixed_6b.branch7x7dbl_5", 1, 0, 3},
    {"Mixed_6b.branch_pool", 1, 0, 0},
    {"Mixed_6c.branch1x1", 1, 0, 0}, {"Mixed_6c.branch7x7_1", 1, 0, 0}, {"Mixed_6c.branch7x7_2", 1, 0, 3},
    {"Mixed_6c.branch7x7_3", 1, 3, 0}, {"Mixed_6c.branch7x7dbl_1", 1, 0, 0}, {"Mixed_6c.branch7x7dbl_2", 1, 3, 0},
    {"Mixed_6c.branch7x7dbl_3", 1, 0, 3}, {"Mixed_6c.branch7x7dbl_4", 1, 3, 0}, {"Mixed_6c.branch7x7dbl_5", 1, 0, 3},
    {"Mixed_6c.branch_pool", 1, 0, 0},
    {"Mixed_6d.branch1x1", 1, 0, 0}, {"Mixed_6d.branch7x7_1", 1, 0, 0}, {"Mixed_6d.branch7x7_2", 1, 0, 3},
    {"Mixed_6d.branch7x7_3", 1, 3, 0}, {"Mixed_6d.branch7x7dbl_1", 1, 0, 0}, {"Mixed_6d.branch7x7dbl_2", 1, 3, 0},
    {"Mixed_6d.branch7x7dbl_3", 1, 0, 3}, {"Mixed_6d.branch7x7dbl_4", 1, 3, 0}, {"Mixed_6d.branch7x7dbl_5", 1, 0, 3},
    {"Mixed_6d.branch_pool", 1, 0, 0},
    {"Mixed_6e.branch1x1", 1, 0, 0}, {"Mixed_6e.branch7x7_1", 1, 0, 0}, {"Mixed_6e.branch7x7_2", 1, 0, 3},
    {"Mixed_6e.branch7x7_3", 1, 3, 0}, {"Mixed_6e.branch7x7dbl_1", 1, 0, 0}, {"Mixed_6e.branch7x7dbl_2", 1, 3, 0},
    {"Mixed_6e.branch7x7dbl_3", 1, 0, 3}, {"Mixed_6e.branch7x7dbl_4", 1, 3, 0}, {"Mixed_6e.branch7x7dbl_5", 1, 0, 3},
    {"Mixed_6e.branch_pool", 1, 0, 0},
    // InceptionD
    {"Mixed_7a.branch3x3_1", 1, 0, 0}, {"Mixed_7a.branch3x3_2", 2, 0, 0}, {"Mixed_7a.branch7x7x3_1", 1, 0, 0},
    {"Mixed_7a.branch7x7x3_2", 1, 0, 3}, {"Mixed_7a.branch7x7x3_3", 1, 3, 0}, {"Mixed_7a.branch7x7x3_4", 2, 0, 0},
    // InceptionE x2
    {"Mixed_7b.branch1x1", 1, 0, 0}, {"Mixed_7b.branch3x3_1", 1, 0, 0}, {"Mixed_7b.branch3x3_2a", 1, 0, 1},
    {"Mixed_7b.branch3x3_2b", 1, 1, 0}, {"Mixed_7b.branch3x3dbl_1", 1, 0, 0}, {"Mixed_7b.branch3x3dbl_2", 1, 1, 1},
    {"Mixed_7b.branch3x3dbl_3a", 1, 0, 1}, {"Mixed_7b.branch3x3dbl_3b", 1, 1, 0}, {"Mixed_7b.branch_pool", 1, 0, 0},
    {"Mixed_7c.branch1x1", 1, 0, 0}, {"Mixed_7c.branch3x3_1", 1, 0, 0}, {"Mixed_7c.branch3x3_2a", 1, 0, 1},
    {"Mixed_7c.branch3x3_2b", 1, 1, 0}, {"Mixed_7c.branch3x3dbl_1", 1, 0, 0}, {"Mixed_7c.branch3x3dbl_2", 1, 1, 1},
    {"Mixed_7c.branch3x3dbl_3a", 1, 0, 1}, {"Mixed_7c.branch3x3dbl_3b", 1, 1, 0}, {"Mixed_7c.branch_pool", 1, 0, 0},
};

const Tensor& need(const TensorMap& t, const std::string& name, const fs::path& path) {
  const auto it = t.find(name);
  if (it == t.end()) throw IoError(fmt::format("{}: missing tensor '{}'", path.string(), name));
  return it->second;
}

Tensor concat(std::initializer_list<const Tensor*> parts) {
  auto it = parts.begin();
  Tensor out = **it;
  for (++it; it != parts.end(); ++it) out = kernels::concat_channels(out, **it);
  return out;
}

Tensor pool3_same(const Tensor& x) { return kernels::avg_pool2d(x, 3, 1, 1, true); }
Tensor max3_s2(const Tensor& x) { return kernels::max_pool2d(x, 3, 2, 0); }

}  // namespace

fs::path InceptionV3::locate_weights(const std::optional<fs::path>& explicit_path) {
  fs::path p;
  if (explicit_path) {
    p = *explicit_path;
  } else if (const char* env = std::getenv(kWeightsEnv); env && *env) {
    p = env;
  }
  if (p.empty() || !fs::is_regular_file(p)) {
    throw InvalidArgument(fmt::format(
        "Inception V3 weights not found{}. Export them with tools/export_inception.py and pass --inception-weights "
        "or set {}, or use --extractor tiny_embedder for offline runs",
        p.empty() ? std::string() : fmt::format(" at {}", p.string()), kWeightsEnv));
  }
  return p;
}

InceptionV3::InceptionV3(const fs::path& path) {
  const TensorArchive a = TensorArchive::load(path, kWeightsKind);
  for (const ConvSpec& spec : kConvs) {
    const std::string base = spec.name;
    const Tensor& w = need(a.tensors, base + ".conv.weight", path);
    const Tensor& gamma = need(a.tensors, base + ".bn.weight", path);
    const Tensor& beta = need(a.tensors, base + ".bn.bias", path);
    const Tensor& mean = need(a.tensors, base + ".bn.running_mean", path);
    const Tensor& var = need(a.tensors, base + ".bn.running_var", path);
    if (w.rank() != 4 || gamma.size() != w.dim(0)) {
      throw IoError(fmt::format("{}: tensor '{}' has an unexpected shape", path.string(), base));
    }
    Conv c;
    c.w = w;
    c.b = Tensor({w.dim(0)});
    const std::size_t per = w.size() / w.dim(0);
    for (std::size_t o = 0; o < w.dim(0); ++o) {
      const Scalar s = gamma[o] / std::sqrt(var[o] + kBatchNormEps);
      for (std::size_t k = 0; k < per; ++k) c.w[o * per + k] *= s;
      c.b[o] = beta[o] - mean[o] * s;
    }
    c.stride = spec.stride;
    c.pad_h = spec.pad_h;
    c.pad_w = spec.pad_w;
    convs_.emplace(base, std::move(c));
  }
}

Tensor InceptionV3::conv(const std::string& name, const Tensor& x) const {
  const Conv& c = convs_.at(name);
  Tensor y = kernels::conv2d(x, c.w, {c.stride, c.pad_h, c.pad_w});
  const std::size_t n = y.dim(0), ch = y.dim(1), plane = y.dim(2) * y.dim(3);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t o = 0; o < ch; ++o) {
      Scalar* p = y.data() + (i * ch + o) * plane;
      const Scalar b = c.b[o];
      for (std::size_t k = 0; k < plane; ++k) p[k] = std::max<Scalar>(0, p[k] + b);
    }
  return y;
}

Tensor InceptionV3::mixed_a(const std::string& m, const Tensor& x) const {
  const Tensor b1 = conv(m + ".branch1x1", x);
  const Tensor b5 = conv(m + ".branch5x5_2", conv(m + ".branch5x5_1", x));
  const Tensor b3 = conv(m + ".branch3x3dbl_3", conv(m + ".branch3x3dbl_2", conv(m + ".branch3x3dbl_1", x)));
  const Tensor bp = conv(m + ".branch_pool", pool3_same(x));
  return concat({&b1, &b5, &b3, &bp});
}

Tensor InceptionV3::mixed_b(const std::string& m, const Tensor& x) const {
  const Tensor b3 = conv(m + ".branch3x3", x);
  const Tensor bd = conv(m + ".branch3x3dbl_3", conv(m + ".branch3x3dbl_2", conv(m + ".branch3x3dbl_1", x)));
  const Tensor bp = max3_s2(x);
  return concat({&b3, &bd, &bp});
}

Tensor InceptionV3::mixed_c(const std::string& m, const Tensor& x) const {
  const Tensor b1 = conv(m + ".branch1x1", x);
  const Tensor b7 = conv(m + ".branch7x7_3", conv(m + ".branch7x7_2", conv(m + ".branch7x7_1", x)));
  Tensor bd = conv(m + ".branch7x7dbl_1", x);
  for (const char* s : {".branch7x7dbl_2", ".branch7x7dbl_3", ".branch7x7dbl_4", ".branch7x7dbl_5"}) bd = conv(m + s, bd);
  const Tensor bp = conv(m + ".branch_pool", pool3_same(x));
  return concat({&b1, &b7, &bd, &bp});
}

Tensor InceptionV3::mixed_d(const std::string& m, const Tensor& x) const {
  const Tensor b3 = conv(m + ".branch3x3_2", conv(m + ".branch3x3_1", x));
  Tensor b7 = conv(m + ".branch7x7x3_1", x);
  for (const char* s : {".branch7x7x3_2", ".branch7x7x3_3", ".branch7x7x3_4"}) b7 = conv(m + s, b7);
  const Tensor bp = max3_s2(x);
  return concat({&b3, &b7, &bp});
}

Tensor InceptionV3::mixed_e(const std::string& m, const Tensor& x) const {
  const Tensor b1 = conv(m + ".branch1x1", x);
  const Tensor t3 = conv(m + ".branch3x3_1", x);
  const Tensor b3a = conv(m + ".branch3x3_2a", t3), b3b = conv(m + ".branch3x3_2b", t3);
  const Tensor td = conv(m + ".branch3x3dbl_2", conv(m + ".branch3x3dbl_1", x));
  const Tensor bda = conv(m + ".branch3x3dbl_3a", td), bdb = conv(m + ".branch3x3dbl_3b", td);
  const Tensor bp = conv(m + ".branch_pool", pool3_same(x));
  return concat({&b1, &b3a, &b3b, &bda, &bdb, &bp});
}

Tensor InceptionV3::embed_prepared(const Tensor& images) const {
  if (images.rank() != 4 || images.dim(1) != 3 || images.dim(2) < 75 || images.dim(3) < 75) {
    throw InvalidArgument(fmt::format("inception input must be N x 3 x H x W with H, W >= 75, got {}",
                                      shape_string(images.shape())));
  }
  Tensor x = conv("Conv2d_1a_3x3", images);
  x = conv("Conv2d_2b_3x3", conv("Conv2d_2a_3x3", x));
  x = max3_s2(x);
  x = conv("Conv2d_4a_3x3", conv("Conv2d_3b_1x1", x));
  x = max3_s2(x);
  for (const char* m : {"Mixed_5b", "Mixed_5c", "Mixed_5d"}) x = mixed_a(m, x);
  x = mixed_b("Mixed_6a", x);
  for (const char* m : {"Mixed_6b", "Mixed_6c", "Mixed_6d", "Mixed_6e"}) x = mixed_c(m, x);
  x = mixed_d("Mixed_7a", x);
  x = mixed_e("Mixed_7b", x);
  x = mixed_e("Mixed_7c", x);
  // Global average pool.
  const std::size_t n = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  Tensor out({n, c});
  for (std::size_t i = 0; i < n * c; ++i) {
    Scalar s = 0;
    for (std::size_t k = 0; k < plane; ++k) s += x[i * plane + k];
    out[i] = s / static_cast<Scalar>(plane);
  }
  return out;
}

Tensor InceptionV3::embed(const Tensor& images) const {
  if (images.rank() != 4 || (images.dim(1) != 1 && images.dim(1) != 3)) {
    throw InvalidArgument(fmt::format("expected an N x (1|3) x H x W batch, got {}", shape_string(images.shape())));
  }
  Tensor rgb = images;
  if (images.dim(1) == 1) rgb = kernels::concat_channels(kernels::concat_channels(images, images), images);
  // The pretrained network expects inputs scaled to [-1, 1], resized
  // bilinearly (half-pixel centers) to 299 x 299.
  if (rgb.dim(2) != kInputSize || rgb.dim(3) != kInputSize) rgb = kernels::bilinear_resize(rgb, kInputSize, kInputSize);
  return embed_prepared(rgb);
}

}  // namespace dropsynth::fid
