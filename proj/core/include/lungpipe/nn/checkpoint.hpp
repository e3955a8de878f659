// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "lungpipe/nn/network.hpp"

namespace lungpipe::nn {

struct CheckpointMeta {
  std::string architecture_id;
  std::int64_t step = 0;
  std::uint64_t rng_seed = 0;
  /// serialized JSON object with the producing configuration
  std::string config_json = "{}";
};

/// Binary archive: magic, JSON metadata, then named f32 arrays with shapes.
struct Checkpoint {
  CheckpointMeta meta;
  std::vector<std::pair<std::string, Tensor<float>>> arrays;

  const Tensor<float>* find(const std::string& name) const;
};

template <typename T>
Checkpoint make_checkpoint(Network<T>& net, CheckpointMeta meta);

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::filesystem::path& path);

/// Loads every parameter of `net` from the archive. Throws ValidationError
/// on a different architecture id, a missing name or a shape mismatch.
template <typename T>
void load_parameters(const Checkpoint& ckpt, Network<T>& net);

}  // namespace lungpipe::nn
