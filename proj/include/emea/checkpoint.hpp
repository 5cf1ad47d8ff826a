#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "emea/ensemble.hpp"
#include "emea/model.hpp"

namespace emea {

// On-disk layout (all integers little-endian):
//
//   "EMEACKPT"            8-byte magic
//   u32 version           kCheckpointVersion
//   u64 header_bytes      length of the JSON header that follows
//   header                {"config":{...}, "adapters":[{name,kind}], "fusion":n|null,
//                          "metadata":{...}, "tensors":[{name,dtype,shape,offset}]}
//   payload               raw f32 tensors at the listed byte offsets
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  ModelConfig config;
  std::optional<Backbone> backbone;
  std::vector<AdapterParams> adapters;
  std::optional<FusionParams> fusion;
  std::map<std::string, std::string> metadata;

  const AdapterParams* find_adapter(const std::string& name) const;
};

struct ManifestEntry {
  std::string name;
  std::string dtype;
  Shape shape;
  std::uint64_t offset = 0;
};

std::vector<ManifestEntry> manifest(const Checkpoint& ckpt);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
// Throws LoadError naming the offending field or tensor; never returns a
// partially populated checkpoint.
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace emea
