#include "emea/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <unordered_map>

#include <json.hpp>

#include "emea/error.hpp"

namespace emea {

namespace {

constexpr char kMagic[8] = {'E', 'M', 'E', 'A', 'C', 'K', 'P', 'T'};

using json = nlohmann::json;

json config_to_json(const ModelConfig& c) {
  return json{{"vocab_size", c.vocab_size}, {"d_model", c.d_model}, {"n_layers", c.n_layers},
              {"n_heads", c.n_heads},       {"d_ff", c.d_ff},       {"d_adapter", c.d_adapter},
              {"max_len", c.max_len},       {"n_tags", c.n_tags}};
}

ModelConfig config_from_json(const json& j) {
  ModelConfig c;
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  c.d_model = j.at("d_model").get<std::size_t>();
  c.n_layers = j.at("n_layers").get<std::size_t>();
  c.n_heads = j.at("n_heads").get<std::size_t>();
  c.d_ff = j.at("d_ff").get<std::size_t>();
  c.d_adapter = j.at("d_adapter").get<std::size_t>();
  c.max_len = j.at("max_len").get<std::size_t>();
  c.n_tags = j.at("n_tags").get<std::size_t>();
  return c;
}

// Canonical (name, tensor) listing shared by save and load.
template <class Ckpt, class F>
void for_each_tensor(Ckpt& ckpt, F&& f) {
  if (ckpt.backbone) {
    ckpt.backbone->for_each_parameter(
        [&](const std::string& n, auto& t) { f("backbone." + n, t); });
  }
  for (auto& a : ckpt.adapters) {
    a.for_each_parameter([&](const std::string& n, auto& t) { f("adapter." + a.name + "." + n, t); });
  }
  if (ckpt.fusion) {
    ckpt.fusion->for_each_parameter([&](const std::string& n, auto& t) { f("fusion." + n, t); });
  }
}

void write_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
  os.write(reinterpret_cast<const char*>(b), 4);
}

void write_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
  os.write(reinterpret_cast<const char*>(b), 8);
}

std::uint64_t read_le(const unsigned char* p, int bytes) {
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

void write_floats_le(std::ostream& os, const Tensor& t) {
  if constexpr (std::endian::native == std::endian::little) {
    os.write(reinterpret_cast<const char*>(t.storage().data()),
             static_cast<std::streamsize>(t.numel() * sizeof(float)));
  } else {
    for (float v : t.storage()) write_u32(os, std::bit_cast<std::uint32_t>(v));
  }
}

void read_floats_le(const unsigned char* src, Tensor& t) {
  if constexpr (std::endian::native == std::endian::little) {
    std::memcpy(t.storage().data(), src, t.numel() * sizeof(float));
  } else {
    for (std::size_t i = 0; i < t.numel(); ++i)
      t[i] = std::bit_cast<float>(static_cast<std::uint32_t>(read_le(src + 4 * i, 4)));
  }
}

}  // namespace

const AdapterParams* Checkpoint::find_adapter(const std::string& name) const {
  for (const auto& a : adapters)
    if (a.name == name) return &a;
  return nullptr;
}

std::vector<ManifestEntry> manifest(const Checkpoint& ckpt) {
  std::vector<ManifestEntry> out;
  std::uint64_t offset = 0;
  for_each_tensor(ckpt, [&](const std::string& name, const Tensor& t) {
    out.push_back(ManifestEntry{name, "f32", t.shape(), offset});
    offset += t.numel() * sizeof(float);
  });
  return out;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  std::unordered_map<std::string, int> names;
  for (const auto& a : ckpt.adapters) {
    if (++names[a.name] > 1) throw ConfigError("checkpoint: duplicate adapter name '" + a.name + "'");
  }
  json header;
  header["config"] = config_to_json(ckpt.config);
  header["backbone"] = ckpt.backbone.has_value();
  header["backbone_frozen"] = ckpt.backbone ? ckpt.backbone->frozen : false;
  header["adapters"] = json::array();
  for (const auto& a : ckpt.adapters) {
    header["adapters"].push_back({{"name", a.name}, {"kind", to_string(a.kind)}, {"frozen", a.frozen}});
  }
  header["fusion"] = ckpt.fusion ? json(ckpt.fusion->n_adapters) : json(nullptr);
  header["metadata"] = ckpt.metadata;
  header["tensors"] = json::array();
  for (const auto& e : manifest(ckpt)) {
    header["tensors"].push_back(
        {{"name", e.name}, {"dtype", e.dtype}, {"shape", e.shape}, {"offset", e.offset}});
  }
  const std::string text = header.dump();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("checkpoint: cannot write " + path.string());
    os.write(kMagic, sizeof(kMagic));
    write_u32(os, kCheckpointVersion);
    write_u64(os, text.size());
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    for_each_tensor(ckpt, [&](const std::string&, const Tensor& t) { write_floats_le(os, t); });
    if (!os) throw DataError("checkpoint: write failed for " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw LoadError("checkpoint: cannot open " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(is)),
                                   std::istreambuf_iterator<char>());
  const std::string where = path.string() + ": ";
  constexpr std::size_t kPrefix = sizeof(kMagic) + 4 + 8;
  if (bytes.size() < kPrefix) throw LoadError(where + "truncated before header");
  if (std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) throw LoadError(where + "bad magic");
  const auto version = static_cast<std::uint32_t>(read_le(bytes.data() + 8, 4));
  if (version != kCheckpointVersion) {
    throw LoadError(where + "format version " + std::to_string(version) + ", expected " +
                    std::to_string(kCheckpointVersion));
  }
  const std::uint64_t header_bytes = read_le(bytes.data() + 12, 8);
  if (header_bytes > bytes.size() - kPrefix) {
    throw LoadError(where + "header length " + std::to_string(header_bytes) +
                    " exceeds file size " + std::to_string(bytes.size()));
  }
  json header;
  try {
    header = json::parse(bytes.begin() + kPrefix, bytes.begin() + kPrefix + header_bytes);
  } catch (const json::exception& e) {
    throw LoadError(where + "malformed header: " + e.what());
  }
  const unsigned char* payload = bytes.data() + kPrefix + header_bytes;
  const std::uint64_t payload_bytes = bytes.size() - kPrefix - header_bytes;

  Checkpoint ckpt;
  try {
    ckpt.config = config_from_json(header.at("config"));
    ckpt.config.validate();
    if (header.at("backbone").get<bool>()) {
      ckpt.backbone = init_model(ckpt.config, 0).backbone;
      ckpt.backbone->frozen = header.value("backbone_frozen", false);
    }
    for (const auto& a : header.at("adapters")) {
      auto params = init_adapter(ckpt.config, adapter_kind_from_string(a.at("kind").get<std::string>()),
                                 a.at("name").get<std::string>(), 0);
      params.frozen = a.value("frozen", false);
      ckpt.adapters.push_back(std::move(params));
    }
    if (!header.at("fusion").is_null()) {
      ckpt.fusion = init_fusion(ckpt.config, header.at("fusion").get<std::size_t>(), 0);
    }
    if (header.contains("metadata")) {
      ckpt.metadata = header.at("metadata").get<std::map<std::string, std::string>>();
    }
  } catch (const json::exception& e) {
    throw LoadError(where + "malformed header: " + e.what());
  } catch (const ConfigError& e) {
    throw LoadError(where + e.what());
  }

  std::unordered_map<std::string, Tensor*> expected;
  for_each_tensor(ckpt, [&](const std::string& name, Tensor& t) { expected.emplace(name, &t); });

  std::unordered_map<std::string, bool> filled;
  for (const auto& entry : header.at("tensors")) {
    const auto name = entry.at("name").get<std::string>();
    auto it = expected.find(name);
    if (it == expected.end()) throw LoadError(where + "unknown tensor '" + name + "'");
    if (entry.at("dtype").get<std::string>() != "f32") {
      throw LoadError(where + "tensor '" + name + "' has unsupported dtype");
    }
    const auto shape = entry.at("shape").get<Shape>();
    Tensor& dst = *it->second;
    if (shape != dst.shape()) {
      throw LoadError(where + "tensor '" + name + "' has shape " + shape_string(shape) +
                      ", expected " + shape_string(dst.shape()));
    }
    const auto offset = entry.at("offset").get<std::uint64_t>();
    const std::uint64_t size = dst.numel() * sizeof(float);
    if (offset > payload_bytes || size > payload_bytes - offset) {
      throw LoadError(where + "tensor '" + name + "' truncated (payload " +
                      std::to_string(payload_bytes) + " bytes)");
    }
    read_floats_le(payload + offset, dst);
    filled[name] = true;
  }
  for (const auto& [name, _] : expected) {
    if (!filled.count(name)) throw LoadError(where + "missing tensor '" + name + "'");
  }
  return ckpt;
}

}  // namespace emea
