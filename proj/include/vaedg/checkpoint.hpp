#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "vaedg/nn.hpp"

namespace vaedg {

struct CheckpointMeta {
  long step = 0;
  std::uint64_t seed = 0;
  std::string config_digest;
  bool operator==(const CheckpointMeta&) const = default;
};

/// Writes one `<name>.bin` per parameter plus `meta.txt` into dir.
///
/// Parameter files: ASCII magic "VDGP", then little-endian uint32 version (1),
/// uint32 rank, rank x uint32 dims, and the values as little-endian float32.
/// meta.txt holds `step=`, `seed=`, `config_digest=` and one
/// `param=<name> <group>` line per parameter in registration order.
void save_checkpoint(const std::filesystem::path& dir, const ParameterSet<float>& params, const CheckpointMeta& meta);

struct Checkpoint {
  ParameterSet<float> params;
  CheckpointMeta meta;
};

Checkpoint load_checkpoint(const std::filesystem::path& dir);

}  // namespace vaedg
