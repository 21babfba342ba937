#pragma once

#include <cstddef>
#include <filesystem>

#include "floodlora/model.hpp"

namespace floodlora {

// "FLCK", u32 version, u64 manifest length, JSON manifest (config, strategy,
// merged_from_rank, records [{name, shape}]), then every record's values as
// little-endian 64-bit floats in manifest order.
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointInfo {
  EncoderConfig config;
  Strategy strategy;
  std::size_t merged_from_rank = 0;
};

void save_checkpoint(const std::filesystem::path& path, const SegModel& model);

struct LoadedCheckpoint {
  CheckpointInfo info;
  StateDict state;
};

LoadedCheckpoint read_checkpoint(const std::filesystem::path& path);
// Rebuilds the model from the manifest and loads every record strictly.
SegModel load_checkpoint(const std::filesystem::path& path);

}  // namespace floodlora
