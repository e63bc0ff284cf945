#include "dropsynth/checkpoint.hpp"

#include <random>

#include <fmt/format.h>

#include "dropsynth/error.hpp"

namespace dropsynth::gan {

namespace {

const ArchiveKind kCheckpointKind{"DSGANCK", GanCheckpoint::kFormatVersion};

}  // namespace

std::string fnv1a_hex(const std::string& text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return fmt::format("{:016x}", h);
}

std::string GanCheckpoint::id() const {
  return fmt::format("{}-s{}-{}", config_hash.substr(0, 8), stage, images_seen);
}

void GanCheckpoint::save(const std::filesystem::path& path) const {
  TensorArchive a;
  a.meta = {{"network", network.to_json()}, {"config_hash", config_hash}, {"stage", stage},
            {"alpha", alpha},               {"images_seen", images_seen}, {"trainer", trainer}};
  a.tensors = tensors;
  a.save(path, kCheckpointKind);
}

GanCheckpoint GanCheckpoint::load(const std::filesystem::path& path) {
  TensorArchive a = TensorArchive::load(path, kCheckpointKind);
  GanCheckpoint ck;
  try {
    ck.network = NetworkConfig::from_json(a.meta.at("network"));
    ck.config_hash = a.meta.at("config_hash").get<std::string>();
    ck.stage = a.meta.at("stage").get<int>();
    ck.alpha = a.meta.at("alpha").get<Scalar>();
    ck.images_seen = a.meta.at("images_seen").get<std::uint64_t>();
    ck.trainer = a.meta.value("trainer", nlohmann::json::object());
  } catch (const nlohmann::json::exception& e) {
    throw IoError(fmt::format("{}: bad checkpoint metadata: {}", path.string(), e.what()));
  }
  ck.tensors = std::move(a.tensors);
  return ck;
}

namespace {

template <typename Net>
Net rebuild(const GanCheckpoint& ck, char prefix) {
  // Initial weights are overwritten below; the rng only shapes the tensors.
  std::mt19937_64 rng(0);
  Net net(ck.network, rng);
  while (net.active_stage() < ck.stage) net.grow(rng);
  TensorMap own;
  const std::string lead = std::string(1, prefix) + ".";
  for (const auto& [name, t] : ck.tensors) {
    if (name.compare(0, lead.size(), lead) == 0) own.emplace(name, t);
  }
  net.load_state(own);
  net.set_alpha(ck.alpha);
  return net;
}

}  // namespace

Generator GanCheckpoint::generator() const { return rebuild<Generator>(*this, 'g'); }
Discriminator GanCheckpoint::discriminator() const { return rebuild<Discriminator>(*this, 'd'); }

GanCheckpoint make_checkpoint(const Generator& g, const Discriminator& d, const std::string& config_hash,
                              std::uint64_t images_seen) {
  if (g.active_stage() != d.active_stage()) throw InvalidArgument("generator and critic are at different stages");
  GanCheckpoint ck;
  ck.network = g.config();
  ck.config_hash = config_hash;
  ck.stage = g.active_stage();
  ck.alpha = g.alpha();
  ck.images_seen = images_seen;
  ck.tensors = g.state();
  for (auto& [name, t] : d.state()) ck.tensors.emplace(name, t);
  return ck;
}

}  // namespace dropsynth::gan
