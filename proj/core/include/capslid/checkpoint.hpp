// capslid/checkpoint.hpp
//
// Binary checkpoint: magic "CLID", u32 version (=1), u64 step, a tensor
// table of (u32 name length, name bytes, u32 rank, u64 dims, f32
// little-endian data) holding parameters and optimizer moments, a canonical
// JSON block (model/train config plus optional threshold table), and a
// trailing CRC32 over all preceding bytes. Tensors are stored as f32; a
// save/load round trip of already-loaded parameters is bit-exact.

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>

#include "capslid/nonclass.hpp"
#include "capslid/train.hpp"

namespace capslid {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  std::uint64_t step = 0;
  ModelParams params;
  AdamState opt;
  TrainConfig train_config;
  std::optional<ThresholdTable> thresholds;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);

// Throws IoError (unreadable/structurally broken), ChecksumMismatch (any
// corrupted byte), or VersionMismatch (file written by a newer format).
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace capslid
