#pragma once

#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "sabone/grid.hpp"

namespace sabone {

/// Runs of foreground over the row-major flattened mask: (start, length).
using Rle = std::vector<std::pair<int64_t, int64_t>>;

Rle rle_encode(std::span<const uint8_t> mask);
/// Throws Error(Format) for overlapping, unordered or out-of-bounds runs.
std::vector<uint8_t> rle_decode(const Rle& runs, int64_t size);

nlohmann::json rle_to_json(const Rle& runs);
Rle rle_from_json(const nlohmann::json& j);

}  // namespace sabone
