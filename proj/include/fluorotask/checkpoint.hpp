#pragma once

#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "fluorotask/tensor.hpp"

namespace fluorotask {

inline constexpr std::uint32_t kCheckpointVersion = 1;

// Named-tensor container with a JSON metadata blob. Tensor payloads are raw
// little-endian doubles, so a save/load round trip is value-exact.
struct Checkpoint {
  std::uint32_t version = kCheckpointVersion;
  nlohmann::json meta;
  std::vector<std::pair<std::string, Tensor>> tensors;

  const Tensor* find(const std::string& name) const;
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
// Throws std::runtime_error on a bad magic, a version mismatch, or a
// truncated file; the message names the offending path.
Checkpoint load_checkpoint(const std::string& path);

}  // namespace fluorotask
