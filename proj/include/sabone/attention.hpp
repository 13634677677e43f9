#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "sabone/grid.hpp"

namespace sabone {

/// Voxelwise foreground probabilities of the low-resolution 3D branch,
/// shape (D_r, H_r, W_r), values in [0,1].
using ProbabilityVolume = Grid3<float>;

enum class RescaleMode {
    Literal,     ///< v <= p_low: a1*v, else a2*v
    Continuous,  ///< v <= p_low: a1*v, else p_high + a2*(v - p_low)
};

struct AttentionConfig {
    double eps_attn = 0.1;
    int64_t depth_window = 16;
    double p_low = 0.05;
    double p_high = 0.8;
    double eps_rescale = 1e-3;
    RescaleMode rescale_mode = RescaleMode::Literal;

    double alpha1() const { return p_high / p_low; }
    double alpha2() const { return (1.0 - p_high) / (1.0 - p_low); }

    /// 0 < p_low < p_high < 1, depth_window >= 1.
    void validate() const;
};

nlohmann::json to_json(const AttentionConfig& c);
AttentionConfig attention_config_from_json(const nlohmann::json& j, AttentionConfig base = {});

/// 2D map in [0,1] (or >= 0 before normalisation), shape (H_r, W_r).
/// Kept in double so the chain composes without float rounding.
struct AttentionMap {
    Plane<double> values;
    int64_t source_slice = 0;
};

/// Zeroes every probability <= eps (inclusive).
ProbabilityVolume threshold_probabilities(const ProbabilityVolume& pv, double eps);

/// Low-resolution depth centre for original slice k of a depth-D volume:
/// round(k * D_r / D) clamped to [0, D_r - 1].
int64_t lowres_depth_centre(int64_t k, int64_t original_depth, int64_t lowres_depth);

/// Sums thresholded probabilities over the window
/// [d_c - D_s/2, d_c + D_s/2 - 1] clipped to the volume.
AttentionMap accumulate_depth_window(const ProbabilityVolume& thresholded, int64_t slice_index,
                                     int64_t original_depth, const AttentionConfig& cfg);

/// Divides by the map's own maximum; an all-zero map is returned unchanged.
AttentionMap normalize_attention(const AttentionMap& abs_map);

double rescale_value(double v, const AttentionConfig& cfg);
AttentionMap rescale_attention(const AttentionMap& map, const AttentionConfig& cfg);

/// threshold -> accumulate -> normalize -> rescale.
AttentionMap compute_depth_attention(const ProbabilityVolume& pv, int64_t slice_index, int64_t original_depth,
                                     const AttentionConfig& cfg);

/// One map per original slice, thresholding once. Result shape
/// (original_depth, H_r, W_r), stored as float.
Grid3<float> compute_attention_stack(const ProbabilityVolume& pv, int64_t original_depth, const AttentionConfig& cfg);

// --- persistence: <stem>.attn.json + <stem>.attn.raw (f32le [D, H_r, W_r]) ---

struct AttentionFile {
    Grid3<float> maps;
    nlohmann::json meta;  ///< {"shape", "dtype", "cfg", ...}
};

std::filesystem::path attention_header_path(const std::filesystem::path& dir, const std::string& stem);
void save_attention_file(const std::filesystem::path& dir, const std::string& stem, const Grid3<float>& maps,
                         const AttentionConfig& cfg, const nlohmann::json& extra);
AttentionFile load_attention_file(const std::filesystem::path& dir, const std::string& stem);

}  // namespace sabone
