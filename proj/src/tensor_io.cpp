#include "dropsynth/tensor_io.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cstring>
#include <fstream>

#include <fmt/format.h>

#include "dropsynth/error.hpp"

namespace dropsynth {

namespace {

constexpr std::uint64_t kMaxMetaBytes = std::uint64_t{1} << 30;
constexpr std::uint32_t kMaxRank = 8;
constexpr std::uint32_t kMaxName = 4096;
constexpr std::uint64_t kMaxElements = std::uint64_t{1} << 33;

std::array<char, 8> magic_bytes(const std::string& magic) {
  if (magic.size() > 8) throw InvalidArgument("archive magic longer than 8 bytes");
  std::array<char, 8> out{};
  std::copy(magic.begin(), magic.end(), out.begin());
  return out;
}

template <typename T>
T to_little(T v) {
  if constexpr (std::endian::native == std::endian::big) {
    unsigned char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    std::reverse(b, b + sizeof(T));
    std::memcpy(&v, b, sizeof(T));
  }
  return v;
}

template <typename T>
void put(std::ostream& out, T v) {
  v = to_little(v);
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

class Reader {
 public:
  Reader(std::istream& in, const std::filesystem::path& path) : in_(in), path_(path) {}

  template <typename T>
  T get() {
    T v;
    bytes(reinterpret_cast<char*>(&v), sizeof(T));
    return to_little(v);
  }

  void bytes(char* dst, std::size_t n) {
    in_.read(dst, static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n) fail("truncated file");
  }

  [[noreturn]] void fail(const std::string& what) const {
    throw IoError(fmt::format("{}: {}", path_.string(), what));
  }

 private:
  std::istream& in_;
  const std::filesystem::path& path_;
};

}  // namespace

void TensorArchive::save(const std::filesystem::path& path, const ArchiveKind& kind) const {
  const auto magic = magic_bytes(kind.magic);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError(fmt::format("cannot write {}", path.string()));
    out.write(magic.data(), magic.size());
    put<std::uint32_t>(out, kind.version);
    const std::string text = meta.dump();
    put<std::uint64_t>(out, text.size());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    put<std::uint64_t>(out, tensors.size());
    for (const auto& [name, t] : tensors) {
      put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
      out.write(name.data(), static_cast<std::streamsize>(name.size()));
      put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
      for (std::size_t d : t.shape()) put<std::uint64_t>(out, d);
      if constexpr (std::endian::native == std::endian::little) {
        out.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(Scalar)));
      } else {
        for (std::size_t i = 0; i < t.size(); ++i) put<double>(out, t[i]);
      }
    }
    if (!out) throw IoError(fmt::format("error while writing {}", path.string()));
  }
  std::filesystem::rename(tmp, path);
}

TensorArchive TensorArchive::load(const std::filesystem::path& path, const ArchiveKind& kind) {
  const auto expected = magic_bytes(kind.magic);
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(fmt::format("cannot open {}", path.string()));
  Reader r(in, path);
  std::array<char, 8> magic{};
  r.bytes(magic.data(), magic.size());
  if (magic != expected) r.fail(fmt::format("not a {} file", kind.magic));
  const auto version = r.get<std::uint32_t>();
  if (version != kind.version) r.fail(fmt::format("unsupported version {} (expected {})", version, kind.version));
  const auto meta_len = r.get<std::uint64_t>();
  if (meta_len > kMaxMetaBytes) r.fail("corrupt metadata length");
  std::string text(meta_len, '\0');
  r.bytes(text.data(), text.size());

  TensorArchive a;
  try {
    a.meta = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    r.fail(fmt::format("bad metadata: {}", e.what()));
  }
  const auto count = r.get<std::uint64_t>();
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto name_len = r.get<std::uint32_t>();
    if (name_len > kMaxName) r.fail("corrupt tensor name");
    std::string name(name_len, '\0');
    r.bytes(name.data(), name.size());
    const auto rank = r.get<std::uint32_t>();
    if (rank > kMaxRank) r.fail(fmt::format("tensor '{}' has rank {}", name, rank));
    Shape shape(rank);
    std::uint64_t elements = 1;
    for (auto& d : shape) {
      const auto dim = r.get<std::uint64_t>();
      if (dim != 0 && elements > kMaxElements / dim) r.fail(fmt::format("tensor '{}' is implausibly large", name));
      elements *= dim;
      d = static_cast<std::size_t>(dim);
    }
    Tensor t(shape);
    if constexpr (std::endian::native == std::endian::little) {
      r.bytes(reinterpret_cast<char*>(t.data()), t.size() * sizeof(Scalar));
    } else {
      for (std::size_t k = 0; k < t.size(); ++k) t[k] = r.get<double>();
    }
    a.tensors.insert_or_assign(std::move(name), std::move(t));
  }
  return a;
}

}  // namespace dropsynth
