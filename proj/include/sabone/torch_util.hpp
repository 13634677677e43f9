#pragma once

#include <map>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "sabone/bundle.hpp"
#include "sabone/grid.hpp"
#include "sabone/volume.hpp"

namespace sabone {

/// Exports every parameter and buffer of `m` (float32), names prefixed.
void export_module(const torch::nn::Module& m, ModelBundle& into, const std::string& prefix = {});

struct LoadReport {
    std::vector<std::string> loaded;
    std::vector<std::string> missing;     ///< in the module, not in the bundle
    std::vector<std::string> unexpected;  ///< in the bundle (under prefix), not in the module
};

/// Copies matching tensors into `m`. With `strict`, any missing/unexpected
/// name or any shape mismatch throws Error(Shape); without it, mismatched
/// shapes still throw but absent names are skipped.
LoadReport import_module(torch::nn::Module& m, const ModelBundle& from, bool strict, const std::string& prefix = {});

/// SHA-256 of each parameter's float32 bytes, keyed by name.
std::map<std::string, std::string> parameter_hashes(const torch::nn::Module& m);

/// Names whose hash differs between two snapshots.
std::vector<std::string> changed_parameters(const std::map<std::string, std::string>& before,
                                            const std::map<std::string, std::string>& after);

torch::Tensor to_tensor(const EncoderInput& x);                 // (3, S, S)
torch::Tensor to_tensor(const FloatPlane& p);                   // (H, W)
torch::Tensor to_tensor(const MaskPlane& p);                    // (H, W) float 0/1
torch::Tensor to_tensor(const Grid3<float>& g);                 // (D, H, W)
Grid3<float> to_grid(const torch::Tensor& t);                   // expects 3D
MaskPlane to_mask_plane(const torch::Tensor& t);                // expects 2D integer/bool

}  // namespace sabone
