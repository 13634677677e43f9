#pragma once

#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "sabone/bundle.hpp"
#include "sabone/depth3d.hpp"
#include "sabone/prompting.hpp"
#include "sabone/torch_util.hpp"

namespace sabone {

struct EncoderConfig {
    int64_t image_size = 256;  ///< S; 1024 reproduces the full-size backbone
    int64_t patch_size = 16;
    int64_t embed_dim = 96;
    int64_t depth = 8;
    int64_t num_heads = 4;
    double mlp_ratio = 4.0;
    std::vector<bool> adapter_flags;  ///< per ViT block; empty means all enabled
    double adapter_ratio = 0.25;
    int64_t out_chans = 128;  ///< C_Z

    int64_t grid_size() const { return image_size / patch_size; }
    bool adapter_enabled(int64_t block) const;
    void validate() const;
};

struct DecoderConfig {
    int64_t depth = 2;
    int64_t num_heads = 4;
    int64_t mlp_dim = 256;
    bool adapters = true;
    double adapter_ratio = 0.25;
    int64_t num_classes = 2;  ///< C_Y: background, bone
    int64_t attention_downsample = 2;
};

struct Sam2dConfig {
    EncoderConfig encoder;
    DecoderConfig decoder;
};

nlohmann::json to_json(const Sam2dConfig& c);
Sam2dConfig sam2d_config_from_json(const nlohmann::json& j, Sam2dConfig base = {});

// --- building blocks -----------------------------------------------------------

/// x + up(relu(down(x))), bottleneck floor(ratio * dim). The up-projection
/// starts at zero so a fresh adapter is the identity.
class AdapterImpl : public torch::nn::Module {
public:
    AdapterImpl(int64_t dim, double ratio);
    torch::Tensor forward(const torch::Tensor& x);

    bool enabled = true;
    torch::nn::Linear down{nullptr}, up{nullptr};
};
TORCH_MODULE(Adapter);

/// Multi-head attention with separate q/k/v projections to `internal_dim`.
class AttentionImpl : public torch::nn::Module {
public:
    AttentionImpl(int64_t dim, int64_t num_heads, int64_t internal_dim = 0);
    torch::Tensor forward(const torch::Tensor& q, const torch::Tensor& k, const torch::Tensor& v);

    int64_t num_heads;
    torch::nn::Linear q_proj{nullptr}, k_proj{nullptr}, v_proj{nullptr}, out_proj{nullptr};
};
TORCH_MODULE(Attention);

class MlpImpl : public torch::nn::Module {
public:
    MlpImpl(int64_t dim, int64_t hidden);
    torch::Tensor forward(const torch::Tensor& x);
    torch::nn::Linear fc1{nullptr}, fc2{nullptr};
};
TORCH_MODULE(Mlp);

/// Channel LayerNorm for (B, C, H, W) maps.
class LayerNorm2dImpl : public torch::nn::Module {
public:
    explicit LayerNorm2dImpl(int64_t channels, double eps = 1e-6);
    torch::Tensor forward(const torch::Tensor& x);
    torch::Tensor weight, bias;
    double eps;
};
TORCH_MODULE(LayerNorm2d);

/// Pre-norm ViT block; with adapters, one follows the attention output and
/// one sits on the MLP residual branch.
class VitBlockImpl : public torch::nn::Module {
public:
    VitBlockImpl(int64_t dim, int64_t heads, double mlp_ratio, bool with_adapters, double adapter_ratio);
    torch::Tensor forward(const torch::Tensor& x);

    torch::nn::LayerNorm norm1{nullptr}, norm2{nullptr};
    Attention attn{nullptr};
    Mlp mlp{nullptr};
    Adapter adapter_attn{nullptr}, adapter_mlp{nullptr};
};
TORCH_MODULE(VitBlock);

class ImageEncoderImpl : public torch::nn::Module {
public:
    explicit ImageEncoderImpl(const EncoderConfig& cfg);
    /// (B, 3, S, S) -> (B, C_Z, S/16, S/16)
    torch::Tensor forward(const torch::Tensor& x);

    EncoderConfig cfg;
    torch::nn::Conv2d patch_embed{nullptr};
    torch::Tensor pos_embed;
    torch::nn::ModuleList blocks;
    torch::nn::Conv2d neck_conv1{nullptr}, neck_conv2{nullptr};
    LayerNorm2d neck_norm1{nullptr}, neck_norm2{nullptr};
};
TORCH_MODULE(ImageEncoder);

/// Sparse tokens (n, C_Z) plus dense grid (C_Z, H_Z, W_Z) for one image.
struct PromptEmbedding {
    torch::Tensor sparse;
    torch::Tensor dense;
};

class PromptEncoderImpl : public torch::nn::Module {
public:
    PromptEncoderImpl(int64_t embed_dim, int64_t grid_size, int64_t image_size);

    /// nullptr -> the learned defaults: one no-prompt token and the no-mask
    /// grid. Points: Fourier encoding + point-type embedding; boxes: two
    /// corner tokens each.
    PromptEmbedding forward(const PromptSet* prompts);
    /// Positional encoding of the image grid, (C_Z, H_Z, W_Z).
    torch::Tensor dense_pe();
    /// Fourier features of coordinates already normalised to [0,1], (N, C_Z).
    torch::Tensor encode_coords(const torch::Tensor& xy01);

    int64_t embed_dim, grid_size, image_size;
    torch::Tensor gaussian;        // buffer (2, C_Z/2)
    torch::Tensor point_embed;     // (1, C_Z)
    torch::Tensor corner_embed;    // (2, C_Z)
    torch::Tensor no_prompt_token; // (1, C_Z)
    torch::Tensor no_mask_embed;   // (C_Z)
};
TORCH_MODULE(PromptEncoder);

class TwoWayBlockImpl : public torch::nn::Module {
public:
    TwoWayBlockImpl(int64_t dim, int64_t heads, int64_t mlp_dim, int64_t downsample, bool skip_first_pe,
                    bool with_adapters, double adapter_ratio);
    std::pair<torch::Tensor, torch::Tensor> forward(torch::Tensor queries, torch::Tensor keys,
                                                    const torch::Tensor& query_pe, const torch::Tensor& key_pe);

    bool skip_first_pe;
    Attention self_attn{nullptr}, cross_token_to_image{nullptr}, cross_image_to_token{nullptr};
    torch::nn::LayerNorm norm1{nullptr}, norm2{nullptr}, norm3{nullptr}, norm4{nullptr};
    Mlp mlp{nullptr};
    Adapter adapter_self{nullptr}, adapter_t2i{nullptr}, adapter_mlp{nullptr}, adapter_i2t{nullptr};
};
TORCH_MODULE(TwoWayBlock);

class MaskDecoderImpl : public torch::nn::Module {
public:
    MaskDecoderImpl(const DecoderConfig& cfg, int64_t embed_dim, int64_t image_size);

    /// image: (B, C, H, W); image_pe: (C, H, W); prompts: B embeddings.
    /// Returns logits (B, C_Y, S, S).
    torch::Tensor forward(const torch::Tensor& image, const torch::Tensor& image_pe,
                          const std::vector<PromptEmbedding>& prompts);

    DecoderConfig cfg;
    int64_t embed_dim, image_size;
    torch::Tensor mask_tokens;  // (C_Y, C)
    torch::nn::ModuleList layers;
    Attention final_attn{nullptr};
    torch::nn::LayerNorm norm_final{nullptr};
    torch::nn::ConvTranspose2d upscale1{nullptr}, upscale2{nullptr};
    LayerNorm2d upscale_norm{nullptr};
    torch::nn::ModuleList hypernetworks;

private:
    torch::Tensor run(const torch::Tensor& src, const torch::Tensor& pos, const torch::Tensor& tokens);
};
TORCH_MODULE(MaskDecoder);

// --- the full 2D branch ------------------------------------------------------

/// Image encoder, prompt encoder, mask decoder and the attention fusion
/// gate that sits between encoder and decoder.
class Sam2dImpl : public torch::nn::Module {
public:
    explicit Sam2dImpl(const Sam2dConfig& cfg);

    torch::Tensor encode_image(const torch::Tensor& x);
    PromptEmbedding encode_prompts(const PromptSet* prompts);
    torch::Tensor decode_masks(const torch::Tensor& z, const std::vector<PromptEmbedding>& prompts);

    /// Applies the fusion gate unless it is bypassed: no attention, or
    /// gate_override == 1 exactly, leaves `z` untouched.
    torch::Tensor maybe_fuse(const torch::Tensor& z, const torch::Tensor& attention,
                             std::optional<double> gate_override);

    /// x: (B, 3, S, S). prompts: empty (all automatic) or B entries where
    /// nullptr means automatic. attention: undefined or (B, 1, H_r, W_r).
    torch::Tensor forward(const torch::Tensor& x, const std::vector<const PromptSet*>& prompts = {},
                          const torch::Tensor& attention = {}, std::optional<double> gate_override = std::nullopt);

    void set_adapters_enabled(bool enabled);

    Sam2dConfig cfg;
    ImageEncoder image_encoder{nullptr};
    PromptEncoder prompt_encoder{nullptr};
    MaskDecoder mask_decoder{nullptr};
    FusionGate fusion{nullptr};
};
TORCH_MODULE(Sam2d);

/// Parameter-name classification used by the training stages.
bool is_adapter_parameter(const std::string& name);
bool is_output_head_parameter(const std::string& name);
bool is_encoder_parameter(const std::string& name);
bool is_fusion_parameter(const std::string& name);
bool is_decoder_parameter(const std::string& name);
bool is_prompt_encoder_parameter(const std::string& name);

/// Bundle holding all 2D-branch tensors plus the config echo.
ModelBundle to_bundle(Sam2d& model, const std::string& stage, uint64_t seed, const nlohmann::json& provenance = {});
/// Builds a model from the bundle's config and loads it strictly.
Sam2d sam2d_from_bundle(const ModelBundle& b);
/// Overwrites matching tensors; adapters and heads absent from the bundle
/// stay at their initial values. Strict mode rejects any name or shape
/// difference.
LoadReport load_pretrained(Sam2d& model, const ModelBundle& b, bool strict);

/// Model input for one slice: min-max, resize to S, ImageNet standardise.
torch::Tensor slice_input(const FloatPlane& slice, int64_t image_size);

}  // namespace sabone
