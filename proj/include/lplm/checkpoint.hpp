#pragma once

#include <string>
#include <utility>
#include <vector>

#include "lplm/tensor.hpp"

namespace lplm::core {

struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

// Checkpoint file layout:
//   bytes 0..3   magic "LPLM"
//   bytes 4..7   format version, u32 little-endian (currently 1)
//   bytes 8..15  reserved, zero
//   u64 little-endian manifest length
//   manifest     JSON: {"params": [{"name","shape","offset"}, ...]},
//                offsets in bytes relative to the payload start
//   payload      raw little-endian float64, concatenated
void save_checkpoint(const std::string& path, const std::vector<std::pair<std::string, const Tensor*>>& items);

// Loads exactly the named tensors; each destination tensor must already have
// its expected shape, which is validated against the manifest.
void load_checkpoint(const std::string& path, const std::vector<std::pair<std::string, Tensor*>>& items);

// Names present in a checkpoint, in manifest order.
std::vector<std::string> checkpoint_names(const std::string& path);

}  // namespace lplm::core
