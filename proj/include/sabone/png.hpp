#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sabone/grid.hpp"

namespace sabone {

/// 8-bit grayscale PNG bytes for row-major `pixels` (height x width).
std::string encode_png_gray8(const std::vector<uint8_t>& pixels, int64_t height, int64_t width);

/// Decodes an 8-bit grayscale PNG (used by tests and tooling).
Plane<uint8_t> decode_png_gray8(const std::string& bytes);

/// Min-max windowed rendering of a slice to 8 bits; constant slices map to 0.
std::vector<uint8_t> render_gray8(const FloatPlane& slice);

}  // namespace sabone
