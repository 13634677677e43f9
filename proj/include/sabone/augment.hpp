#pragma once

#include <array>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "sabone/grid.hpp"

namespace sabone {

using Rng = std::mt19937_64;

/// Names accepted in a pipeline. Spatial transforms move image, mask (and
/// the optional auxiliary plane) with one shared set of sampled parameters.
namespace transform {
inline constexpr const char* kResizedCrop = "random_resized_crop";  // params: area scale range
inline constexpr const char* kRotation = "random_rotation";         // params: degrees range
inline constexpr const char* kSharpness = "random_adjust_sharpness";  // params: factor range
inline constexpr const char* kEqualize = "random_equalize";           // no params
inline constexpr const char* kGaussianNoise = "rand_gaussian_noise";  // params: sigma range
inline constexpr const char* kBiasField = "rand_bias_field";          // params: [order, magnitude]
inline constexpr const char* kGibbsNoise = "rand_gibbs_noise";        // params: cut fraction range
}  // namespace transform

struct AugmentStep {
    std::string name;
    double probability = 0.3;
    std::array<double, 2> params{0.0, 0.0};
};

struct AugmentPipeline {
    std::vector<AugmentStep> steps;
    uint64_t seed = 0;

    /// The default training pipeline: every transform at probability 0.3.
    static AugmentPipeline defaults(double probability = 0.3);
    /// Validates names, probabilities in [0,1] and parameter ranges.
    void validate() const;
};

nlohmann::json to_json(const AugmentPipeline& p);
AugmentPipeline augment_pipeline_from_json(const nlohmann::json& j);

/// Applies each step in order, each firing independently with its
/// probability. `aux`, when given, follows the spatial transforms with
/// bilinear interpolation (used for attention maps resampled to slice size).
void apply_pipeline(const AugmentPipeline& p, FloatPlane& image, MaskPlane& mask, Rng& rng,
                    FloatPlane* aux = nullptr);

// --- individual transforms ---------------------------------------------------

/// Crop window in source pixel coordinates; `top,left,height,width`.
struct CropWindow {
    int64_t top = 0, left = 0, height = 0, width = 0;
};

/// Samples a crop covering an area fraction in `scale` with aspect ratio in
/// [3/4, 4/3]; returns the full frame after 5 failed attempts.
CropWindow sample_crop(int64_t height, int64_t width, std::array<double, 2> scale, Rng& rng);
void resized_crop(FloatPlane& image, MaskPlane& mask, const CropWindow& win, FloatPlane* aux = nullptr);
/// Rotation about the image centre, zero fill outside.
void rotate(FloatPlane& image, MaskPlane& mask, double degrees, FloatPlane* aux = nullptr);
/// Blend with a 3x3 smoothed copy: factor 1 is identity, 0 fully smooth,
/// >1 sharpens. Border pixels are kept; output clipped to [0,1].
FloatPlane adjust_sharpness(const FloatPlane& image, double factor);
/// 256-bin histogram equalization of a [0,1] image.
FloatPlane equalize(const FloatPlane& image);

FloatPlane add_gaussian_noise(const FloatPlane& image, double sigma, Rng& rng);
FloatPlane rand_gaussian_noise(const FloatPlane& image, Rng& rng, std::array<double, 2> sigma_range = {0.0, 0.05});

/// Coefficients of a 2D polynomial of total degree <= order over
/// coordinates normalised to [-1,1]; term order is (i, j) with i + j <= order,
/// i outer, j inner, for x^i * y^j (x along width, y along height).
struct BiasCoefficients {
    int order = 3;
    std::vector<double> values;
};

FloatPlane apply_bias_field(const FloatPlane& image, const BiasCoefficients& coeffs);
FloatPlane rand_bias_field(const FloatPlane& image, Rng& rng, int order = 3, double magnitude = 0.3,
                           BiasCoefficients* sampled = nullptr);

/// Keeps frequencies with |k| <= fraction * n / 2 on each axis.
FloatPlane gibbs_truncate(const FloatPlane& image, double fraction);
FloatPlane rand_gibbs_noise(const FloatPlane& image, Rng& rng, std::array<double, 2> fraction_range = {0.5, 0.95});

}  // namespace sabone
