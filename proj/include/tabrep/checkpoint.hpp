// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>

#include "tabrep/backbone.hpp"
#include "tabrep/trainer.hpp"

namespace tabrep {

/// Checkpoint directory layout:
///   manifest.json  - config, vocab hash, progress counters
///   index.json     - tensor name -> shape -> blob file
///   <name>.bin     - one raw little-endian float32 blob per tensor
/// Optimizer moments are stored under "opt.m." / "opt.v." prefixed names.
/// Loading is bit-exact; a corrupt or tampered index fails without partial
/// state.
struct CheckpointMeta {
  RunConfig run;
  std::uint64_t vocab_hash = 0;
  std::int64_t vocab_size = 0;
  std::uint64_t step = 0;
  std::uint64_t samples_seen = 0;
  std::uint64_t tokens_seen = 0;
  bool has_optimizer = false;
  std::uint64_t opt_step = 0;
};

void save_checkpoint(const std::filesystem::path& dir, const Model<float>& model,
                     const OptimizerState* opt, const CheckpointMeta& meta);

struct LoadedCheckpoint {
  Model<float> model;
  std::optional<OptimizerState> opt;
  CheckpointMeta meta;
};

LoadedCheckpoint load_checkpoint(const std::filesystem::path& dir, bool need_optimizer);

/// Content hash over manifest, index, and every blob (in index order).
std::uint64_t checkpoint_content_hash(const std::filesystem::path& dir);

/// Hash of the encoder-stack tensors only (the frozen set during transfer).
std::uint64_t backbone_tensor_hash(const Model<float>& model);

}  // namespace tabrep
