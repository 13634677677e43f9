#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "sabone/augment.hpp"
#include "sabone/grid.hpp"

namespace sabone {

/// Pixel-space point, x along width, y along height.
struct PromptPoint {
    double x = 0;
    double y = 0;
    bool operator==(const PromptPoint&) const = default;
};

/// Box in pixel-edge coordinates; a single pixel (r, c) is the box
/// [c, r, c+1, r+1].
struct PromptBox {
    double x_min = 0, y_min = 0, x_max = 0, y_max = 0;
    bool operator==(const PromptBox&) const = default;
};

enum class PromptKind { Points, Box };

/// One kind per set: points xor boxes.
struct PromptSet {
    PromptKind kind = PromptKind::Points;
    std::vector<PromptPoint> points;
    std::vector<PromptBox> boxes;
    MaskPlane selected;  ///< M_s: union of the prompted components (empty when unknown)
};

/// Throws Error(Range) for points outside [0,width) x [0,height) or boxes
/// outside [0,width] x [0,height]; Error(Invalid) for inverted or empty boxes
/// or an empty set.
void validate_prompts(const PromptSet& p, int64_t height, int64_t width);

/// Wire format shared with the service: {"points":[[x,y],...]} or
/// {"box":[x0,y0,x1,y1]} (also {"boxes":[[...],...]}).
PromptSet prompts_from_json(const nlohmann::json& j);
nlohmann::json to_json(const PromptSet& p);

/// Maps prompts from one pixel grid to another (e.g. native slice to the
/// encoder input size).
PromptSet rescale_prompts(const PromptSet& p, int64_t from_h, int64_t from_w, int64_t to_h, int64_t to_w);

struct Component {
    MaskPlane mask;
    std::vector<int64_t> pixels;  ///< flat indices, ascending
    int64_t min_row = 0, max_row = 0, min_col = 0, max_col = 0;

    int64_t size() const { return static_cast<int64_t>(pixels.size()); }
};

/// 8-connected components sorted by size (descending), ties by first pixel.
std::vector<Component> find_components(const MaskPlane& mask);

struct PromptConfig {
    double prompt_probability = 0.3;   ///< fraction of prompted iterations
    double points_probability = 0.5;   ///< point vs box choice
    double box_jitter = 0.1;           ///< max outward jitter per side, fraction of extent
};

nlohmann::json to_json(const PromptConfig& c);
PromptConfig prompt_config_from_json(const nlohmann::json& j, PromptConfig base = {});

/// Draws K ~ U{1..n} components, then either M ~ U{K..2K} interior points
/// (every chosen component gets at least one) or one jittered box per chosen
/// component. `selected` is the union of the chosen components.
/// Throws Error(Invalid) for an empty mask.
PromptSet sample_prompts(const MaskPlane& gt, Rng& rng, const PromptConfig& cfg = {});

/// Also returns K, the number of selected components.
PromptSet sample_prompts(const MaskPlane& gt, Rng& rng, const PromptConfig& cfg, int64_t& k_out);

enum class PromptMode { Automatic, Prompted };

PromptMode hybrid_mode(Rng& rng, double prompt_probability = 0.3);

/// One point per component at the component pixel closest to its centroid
/// (used to simulate a user clicking each bone once).
PromptSet centroid_prompts(const MaskPlane& gt);

}  // namespace sabone
