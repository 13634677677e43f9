#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

namespace sabone {

struct TensorBlob {
    std::vector<int64_t> shape;
    std::vector<float> values;

    int64_t numel() const;
    bool operator==(const TensorBlob&) const = default;
};

/// Named-parameter checkpoint.
///
/// File layout: 8-byte little-endian manifest length, UTF-8 JSON manifest,
/// then the concatenated f32le payloads. The manifest is
///   {"tensors": {name: {"shape": [...], "dtype": "f32le", "offset": bytes}},
///    "cfg": {...}, "stage": "A2D"|"V3D"|"FUSION", "seed": n, "provenance": {...}}
/// with offsets relative to the start of the payload section.
struct ModelBundle {
    std::map<std::string, TensorBlob> tensors;
    nlohmann::json cfg = nlohmann::json::object();
    std::string stage;
    uint64_t seed = 0;
    nlohmann::json provenance = nlohmann::json::object();

    bool operator==(const ModelBundle&) const = default;
};

std::string serialize_bundle(const ModelBundle& b);
ModelBundle deserialize_bundle(std::string_view bytes);

void save_bundle(const ModelBundle& b, const std::filesystem::path& path);
ModelBundle load_bundle(const std::filesystem::path& path);

std::string sha256_hex(std::string_view bytes);
std::string file_sha256(const std::filesystem::path& path);

}  // namespace sabone
