// Binary checkpoint: magic + JSON header (schema version, config hash,
// parameter manifest with byte offsets) + little-endian float32 payload in
// manifest order. Save -> load -> save round-trips byte-identically.

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "duett/nn.hpp"

namespace duett {

struct CheckpointEntry {
  std::string name;
  Shape shape;
  std::uint64_t offset = 0;  // bytes into the payload
};

struct Checkpoint {
  int schema_version = 1;
  std::string config_hash;
  std::vector<CheckpointEntry> manifest;
  std::vector<float> payload;
};

Checkpoint make_checkpoint(const ParamStore<float>& store,
                           const std::string& config_hash);
void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

// Strict by-name restore: the store and checkpoint must carry exactly the
// same parameter set with matching shapes.
void apply_checkpoint(ParamStore<float>& store, const Checkpoint& ckpt);

}  // namespace duett
