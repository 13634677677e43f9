#pragma once

#include <optional>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "sabone/attention.hpp"
#include "sabone/bundle.hpp"
#include "sabone/volume.hpp"

namespace sabone {

/// Z_fuse = g * Z + (1 - g) * F(Z * P), F = conv3x3 -> ReLU -> conv3x3.
/// The attention map is bilinearly resized to the embedding grid and
/// broadcast over channels. g starts at 1.
class FusionGateImpl : public torch::nn::Module {
public:
    explicit FusionGateImpl(int64_t channels);

    /// z: (B, C, H, W); attention: (B, 1, h, w). `gate_value` replaces the
    /// learned g when given (inference override).
    torch::Tensor forward(const torch::Tensor& z, const torch::Tensor& attention,
                          std::optional<double> gate_value = std::nullopt);
    torch::Tensor transform(const torch::Tensor& x);

    torch::Tensor g;
    torch::nn::Conv2d conv1{nullptr}, conv2{nullptr};
};
TORCH_MODULE(FusionGate);

/// Bilinear (align_corners = false) resize of (B, 1, h, w) maps.
torch::Tensor resize_attention(const torch::Tensor& attention, int64_t height, int64_t width);

/// Three-level residual V-net over (B, 1, 64, 64, 64) inputs; returns logits.
/// Channels base, 2*base, 4*base; 5^3 convolutions on the two coarser levels.
class VNetImpl : public torch::nn::Module {
public:
    explicit VNetImpl(int64_t base = 8);
    torch::Tensor forward(const torch::Tensor& x);

    int64_t base;
    torch::nn::Conv3d enc1{nullptr}, down1{nullptr}, enc2a{nullptr}, enc2b{nullptr}, down2{nullptr},
        enc3a{nullptr}, enc3b{nullptr}, dec2{nullptr}, dec1{nullptr}, head{nullptr};
    torch::nn::ConvTranspose3d up2{nullptr}, up1{nullptr};
    torch::nn::PReLU act1{nullptr}, act_down1{nullptr}, act2a{nullptr}, act2b{nullptr}, act_down2{nullptr},
        act3a{nullptr}, act3b{nullptr}, act_up2{nullptr}, act_dec2{nullptr}, act_up1{nullptr}, act_dec1{nullptr};
};
TORCH_MODULE(VNet);

inline constexpr Shape3 kLowRes{64, 64, 64};

/// Eval-mode probabilities for one low-resolution volume (shape 64^3,
/// values in [0,1]). Throws Error(Shape) for any other shape.
ProbabilityVolume vnet_forward(VNet& net, const Volume& lowres);

/// Isotropic resample + downsample + vnet_forward.
ProbabilityVolume predict_probability_volume(VNet& net, const Volume& v);

ModelBundle to_bundle(VNet& net, uint64_t seed, const nlohmann::json& provenance = {});
VNet vnet_from_bundle(const ModelBundle& b);

}  // namespace sabone
