#pragma once

#include <string>
#include <utility>
#include <vector>

#include "demix/autodiff.hpp"

namespace demix::ad {

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

/// Checkpoint file: magic "DMX1", u32 param count, then per parameter a
/// u32 name length, the name bytes, u32 rank, u32 dims, and the f64 data.
/// All integers and doubles little-endian. Round-trips bit-exactly.
void save_checkpoint(const std::string& path, const NamedTensors& params);
NamedTensors load_checkpoint(const std::string& path);

} // namespace demix::ad
