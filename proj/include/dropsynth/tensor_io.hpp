#pragma once

// Named-tensor archive shared by checkpoints, feature caches and imported
// network weights.
//
// Layout (integers little-endian):
//   magic    8 bytes, identifies the archive kind
//   version  u32
//   meta     u64 byte length, then UTF-8 JSON
//   tensors  u64 count, then per tensor (in name order):
//            u32 name length, name bytes, u32 rank, rank x u64 dims,
//            prod(dims) x f64 values

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

#include <nlohmann/json.hpp>

#include "dropsynth/tensor.hpp"

namespace dropsynth {

using TensorMap = std::map<std::string, Tensor>;

struct ArchiveKind {
  std::string magic;  // at most 8 bytes, zero padded on disk
  std::uint32_t version = 1;
};

struct TensorArchive {
  nlohmann::json meta = nlohmann::json::object();
  TensorMap tensors;

  // Writes to a sibling temp file, then renames over `path`.
  void save(const std::filesystem::path& path, const ArchiveKind& kind) const;
  // Throws IoError on a wrong magic, an unsupported version or a damaged file.
  static TensorArchive load(const std::filesystem::path& path, const ArchiveKind& kind);
};

}  // namespace dropsynth
