#include "duett/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "json.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint payload assumes a little-endian host");

namespace duett {

using ordered_json = nlohmann::ordered_json;

namespace {
constexpr char kMagic[8] = {'D', 'U', 'E', 'T', 'T', 'C', 'K', '1'};
}

Checkpoint make_checkpoint(const ParamStore<float>& store,
                           const std::string& config_hash) {
  Checkpoint ckpt;
  ckpt.config_hash = config_hash;
  std::uint64_t offset = 0;
  for (const auto& p : store.items()) {
    CheckpointEntry e;
    e.name = p->name;
    e.shape = p->value.shape();
    e.offset = offset;
    ckpt.manifest.push_back(std::move(e));
    const auto data = p->value.data();
    ckpt.payload.insert(ckpt.payload.end(), data.begin(), data.end());
    offset += static_cast<std::uint64_t>(data.size()) * sizeof(float);
  }
  return ckpt;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  ordered_json header;
  header["schema_version"] = ckpt.schema_version;
  header["config_hash"] = ckpt.config_hash;
  ordered_json manifest = ordered_json::array();
  for (const auto& e : ckpt.manifest) {
    ordered_json entry;
    entry["name"] = e.name;
    entry["shape"] = e.shape;
    entry["offset"] = e.offset;
    manifest.push_back(std::move(entry));
  }
  header["manifest"] = std::move(manifest);
  const std::string header_str = header.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open " + path + " for writing");
  out.write(kMagic, sizeof(kMagic));
  const std::uint64_t hlen = header_str.size();
  out.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
  out.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));
  out.write(reinterpret_cast<const char*>(ckpt.payload.data()),
            static_cast<std::streamsize>(ckpt.payload.size() * sizeof(float)));
  if (!out) throw DataError("write failed for " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path);
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw DataError(path + " is not a checkpoint file");
  std::uint64_t hlen = 0;
  in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
  std::string header_str(hlen, '\0');
  in.read(header_str.data(), static_cast<std::streamsize>(hlen));
  if (!in) throw DataError("truncated checkpoint header in " + path);

  ordered_json header;
  try {
    header = ordered_json::parse(header_str);
  } catch (const ordered_json::exception& e) {
    throw DataError("bad checkpoint header: " + std::string(e.what()));
  }
  Checkpoint ckpt;
  ckpt.schema_version = header.at("schema_version").get<int>();
  if (ckpt.schema_version != 1)
    throw DataError("unsupported checkpoint schema version " +
                    std::to_string(ckpt.schema_version));
  ckpt.config_hash = header.at("config_hash").get<std::string>();
  std::uint64_t expected = 0;
  for (const auto& entry : header.at("manifest")) {
    CheckpointEntry e;
    e.name = entry.at("name").get<std::string>();
    e.shape = entry.at("shape").get<Shape>();
    e.offset = entry.at("offset").get<std::uint64_t>();
    if (e.offset != expected)
      throw DataError("checkpoint manifest offsets are not contiguous at " + e.name);
    expected += static_cast<std::uint64_t>(shape_numel(e.shape)) * sizeof(float);
    ckpt.manifest.push_back(std::move(e));
  }
  ckpt.payload.resize(expected / sizeof(float));
  in.read(reinterpret_cast<char*>(ckpt.payload.data()),
          static_cast<std::streamsize>(expected));
  if (!in || in.gcount() != static_cast<std::streamsize>(expected))
    throw DataError("truncated checkpoint payload in " + path);
  return ckpt;
}

void apply_checkpoint(ParamStore<float>& store, const Checkpoint& ckpt) {
  if (store.items().size() != ckpt.manifest.size())
    throw DataError("checkpoint carries " + std::to_string(ckpt.manifest.size()) +
                    " parameters, model has " + std::to_string(store.items().size()) +
                    " (config mismatch?)");
  for (const auto& e : ckpt.manifest) {
    Param<float>* p = store.find(e.name);
    if (!p) throw DataError("checkpoint parameter '" + e.name + "' not in model");
    if (p->value.shape() != e.shape)
      throw DataError("checkpoint parameter '" + e.name + "' shape mismatch");
    const float* src = ckpt.payload.data() + e.offset / sizeof(float);
    auto dst = p->value.data();
    std::copy_n(src, dst.size(), dst.begin());
  }
}

}  // namespace duett
