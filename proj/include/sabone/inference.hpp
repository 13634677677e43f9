#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "sabone/attention.hpp"
#include "sabone/dataset.hpp"
#include "sabone/depth3d.hpp"
#include "sabone/prompting.hpp"
#include "sabone/sam2d.hpp"

namespace sabone {

/// Low-resolution attention map for slice k, bilinearly resized to the
/// slice's native (height, width).
FloatPlane attention_plane(const Grid3<float>& stack, int64_t k, int64_t height, int64_t width);

/// Where per-slice attention stacks come from: precomputed files (looked up
/// by the volume's file stem) or a V-net evaluated on demand.
struct AttentionSource {
    std::filesystem::path dir;
    VNet vnet{nullptr};
    AttentionConfig cfg;

    bool enabled() const { return !dir.empty() || !vnet.is_empty(); }
    /// Throws Error(Io) when the precomputed file is missing and no V-net
    /// is available.
    Grid3<float> stack_for(const Volume& v, const std::string& stem) const;
};

/// File stem used for a volume's attention file (archive name without
/// extension).
std::string attention_stem(const std::filesystem::path& volume_path);

/// One slice worth of model input.
struct SliceInput {
    FloatPlane image;                    ///< native resolution
    const PromptSet* prompts = nullptr;  ///< native pixel coordinates; nullptr = automatic
    std::optional<FloatPlane> attention; ///< native resolution
};

/// Builds the (B, 3, S, S) image batch and, when every input carries one,
/// the (B, 1, S, S) attention batch.
torch::Tensor image_batch(const std::vector<SliceInput>& inputs, int64_t image_size);
torch::Tensor attention_batch(const std::vector<FloatPlane>& planes, int64_t image_size);

/// Eval-mode segmentation of a batch of slices; each mask is argmax over
/// classes, nearest-resized back to the slice's native shape.
std::vector<MaskPlane> predict_slices(Sam2d& model, const std::vector<SliceInput>& inputs,
                                      std::optional<double> gate_override = std::nullopt);

/// Raw logits for a batch (B, C_Y, S, S), eval mode, no grad.
torch::Tensor predict_logits(Sam2d& model, const std::vector<SliceInput>& inputs,
                             std::optional<double> gate_override = std::nullopt);

enum class EvalMode { Auto, PromptedOracle, TwoDOnly };
std::string to_string(EvalMode m);
EvalMode eval_mode_from_string(const std::string& s);

/// Segments every slice of `v`. `attention` (D, H_r, W_r) enables fusion;
/// TwoDOnly forces the gate to 1. PromptedOracle places one centroid point
/// per ground-truth component on each slice (`gt` required); slices without
/// foreground run automatically.
MaskVolume predict_volume(Sam2d& model, const Volume& v, const Grid3<float>* attention, EvalMode mode,
                          const MaskVolume* gt = nullptr, int64_t batch_size = 8);

}  // namespace sabone
