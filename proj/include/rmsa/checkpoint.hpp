#pragma once

#include "rmsa/model.hpp"
#include "rmsa/ppo.hpp"

#include <filesystem>
#include <optional>

namespace rmsa {

inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  ModelConfig model;
  std::uint64_t config_hash = 0;  // identifies the run configuration that produced it
  TrainState state;
};

std::string checkpoint_to_string(const Checkpoint& ckpt);
Checkpoint checkpoint_from_string(std::string_view text);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);

/// Loads a checkpoint. If expected_hash is given and differs from the stored
/// hash, throws ConfigError unless force is set.
Checkpoint load_checkpoint(const std::filesystem::path& path, std::optional<std::uint64_t> expected_hash = std::nullopt,
                           bool force = false);

}  // namespace rmsa
