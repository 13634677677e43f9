#include "sabone/sam2d.hpp"

#include <cmath>
#include <numbers>

#include "sabone/error.hpp"

namespace sabone {

namespace F = torch::nn::functional;
using nlohmann::json;

bool EncoderConfig::adapter_enabled(int64_t block) const {
    if (adapter_flags.empty()) return true;
    return adapter_flags.at(static_cast<size_t>(block));
}

void EncoderConfig::validate() const {
    if (patch_size < 1 || image_size % patch_size != 0)
        throw invalid_argument("encoder input size must be divisible by the patch size");
    if (embed_dim % num_heads != 0) throw invalid_argument("embed_dim must be divisible by num_heads");
    if (!adapter_flags.empty() && static_cast<int64_t>(adapter_flags.size()) != depth)
        throw invalid_argument("adapter_flags must have one entry per ViT block");
}

json to_json(const Sam2dConfig& c) {
    const auto& e = c.encoder;
    const auto& d = c.decoder;
    return json{{"encoder",
                 {{"image_size", e.image_size},
                  {"patch_size", e.patch_size},
                  {"embed_dim", e.embed_dim},
                  {"depth", e.depth},
                  {"num_heads", e.num_heads},
                  {"mlp_ratio", e.mlp_ratio},
                  {"adapter_flags", e.adapter_flags},
                  {"adapter_ratio", e.adapter_ratio},
                  {"out_chans", e.out_chans}}},
                {"decoder",
                 {{"depth", d.depth},
                  {"num_heads", d.num_heads},
                  {"mlp_dim", d.mlp_dim},
                  {"adapters", d.adapters},
                  {"adapter_ratio", d.adapter_ratio},
                  {"num_classes", d.num_classes},
                  {"attention_downsample", d.attention_downsample}}}};
}

Sam2dConfig sam2d_config_from_json(const json& j, Sam2dConfig c) {
    if (j.contains("encoder")) {
        const auto& e = j["encoder"];
        c.encoder.image_size = e.value("image_size", c.encoder.image_size);
        c.encoder.patch_size = e.value("patch_size", c.encoder.patch_size);
        c.encoder.embed_dim = e.value("embed_dim", c.encoder.embed_dim);
        c.encoder.depth = e.value("depth", c.encoder.depth);
        c.encoder.num_heads = e.value("num_heads", c.encoder.num_heads);
        c.encoder.mlp_ratio = e.value("mlp_ratio", c.encoder.mlp_ratio);
        c.encoder.adapter_flags = e.value("adapter_flags", c.encoder.adapter_flags);
        c.encoder.adapter_ratio = e.value("adapter_ratio", c.encoder.adapter_ratio);
        c.encoder.out_chans = e.value("out_chans", c.encoder.out_chans);
    }
    if (j.contains("decoder")) {
        const auto& d = j["decoder"];
        c.decoder.depth = d.value("depth", c.decoder.depth);
        c.decoder.num_heads = d.value("num_heads", c.decoder.num_heads);
        c.decoder.mlp_dim = d.value("mlp_dim", c.decoder.mlp_dim);
        c.decoder.adapters = d.value("adapters", c.decoder.adapters);
        c.decoder.adapter_ratio = d.value("adapter_ratio", c.decoder.adapter_ratio);
        c.decoder.num_classes = d.value("num_classes", c.decoder.num_classes);
        c.decoder.attention_downsample = d.value("attention_downsample", c.decoder.attention_downsample);
    }
    c.encoder.validate();
    return c;
}

// --- building blocks -----------------------------------------------------------

AdapterImpl::AdapterImpl(int64_t dim, double ratio) {
    const auto hidden = std::max<int64_t>(1, static_cast<int64_t>(std::floor(ratio * static_cast<double>(dim))));
    down = register_module("down", torch::nn::Linear(dim, hidden));
    up = register_module("up", torch::nn::Linear(hidden, dim));
    torch::NoGradGuard no_grad;
    up->weight.zero_();
    up->bias.zero_();
}

torch::Tensor AdapterImpl::forward(const torch::Tensor& x) {
    if (!enabled) return x;
    return x + up(torch::relu(down(x)));
}

AttentionImpl::AttentionImpl(int64_t dim, int64_t heads, int64_t internal_dim) : num_heads(heads) {
    if (internal_dim <= 0) internal_dim = dim;
    if (internal_dim % heads != 0) throw invalid_argument("attention dim must divide by heads");
    q_proj = register_module("q_proj", torch::nn::Linear(dim, internal_dim));
    k_proj = register_module("k_proj", torch::nn::Linear(dim, internal_dim));
    v_proj = register_module("v_proj", torch::nn::Linear(dim, internal_dim));
    out_proj = register_module("out_proj", torch::nn::Linear(internal_dim, dim));
}

torch::Tensor AttentionImpl::forward(const torch::Tensor& q_in, const torch::Tensor& k_in, const torch::Tensor& v_in) {
    auto split = [this](const torch::Tensor& x) {
        const auto b = x.size(0), n = x.size(1), c = x.size(2);
        return x.reshape({b, n, num_heads, c / num_heads}).transpose(1, 2);  // (B, h, N, d)
    };
    auto q = split(q_proj(q_in)), k = split(k_proj(k_in)), v = split(v_proj(v_in));
    const double scale = 1.0 / std::sqrt(static_cast<double>(q.size(3)));
    auto attn = torch::softmax(torch::matmul(q, k.transpose(2, 3)) * scale, -1);
    auto out = torch::matmul(attn, v).transpose(1, 2);  // (B, N, h, d)
    return out_proj(out.reshape({out.size(0), out.size(1), -1}));
}

MlpImpl::MlpImpl(int64_t dim, int64_t hidden) {
    fc1 = register_module("fc1", torch::nn::Linear(dim, hidden));
    fc2 = register_module("fc2", torch::nn::Linear(hidden, dim));
}

torch::Tensor MlpImpl::forward(const torch::Tensor& x) { return fc2(torch::gelu(fc1(x))); }

LayerNorm2dImpl::LayerNorm2dImpl(int64_t channels, double eps_) : eps(eps_) {
    weight = register_parameter("weight", torch::ones({channels}));
    bias = register_parameter("bias", torch::zeros({channels}));
}

torch::Tensor LayerNorm2dImpl::forward(const torch::Tensor& x) {
    auto u = x.mean(1, true);
    auto s = (x - u).pow(2).mean(1, true);
    auto y = (x - u) / torch::sqrt(s + eps);
    return weight.view({1, -1, 1, 1}) * y + bias.view({1, -1, 1, 1});
}

VitBlockImpl::VitBlockImpl(int64_t dim, int64_t heads, double mlp_ratio, bool with_adapters, double ratio) {
    norm1 = register_module("norm1", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
    attn = register_module("attn", Attention(dim, heads));
    norm2 = register_module("norm2", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
    mlp = register_module("mlp", Mlp(dim, static_cast<int64_t>(dim * mlp_ratio)));
    if (with_adapters) {
        adapter_attn = register_module("adapter_attn", Adapter(dim, ratio));
        adapter_mlp = register_module("adapter_mlp", Adapter(dim, ratio));
    }
}

torch::Tensor VitBlockImpl::forward(const torch::Tensor& x_in) {
    auto y = norm1(x_in);
    auto a = attn(y, y, y);
    if (adapter_attn) a = adapter_attn(a);
    auto x = x_in + a;
    auto m = mlp(norm2(x));
    if (adapter_mlp) m = adapter_mlp(m);
    return x + m;
}

ImageEncoderImpl::ImageEncoderImpl(const EncoderConfig& c) : cfg(c) {
    cfg.validate();
    const auto g = cfg.grid_size();
    patch_embed = register_module(
        "patch_embed", torch::nn::Conv2d(torch::nn::Conv2dOptions(3, cfg.embed_dim, cfg.patch_size).stride(cfg.patch_size)));
    pos_embed = register_parameter("pos_embed", torch::randn({1, g, g, cfg.embed_dim}) * 0.02);
    blocks = register_module("blocks", torch::nn::ModuleList());
    for (int64_t i = 0; i < cfg.depth; ++i)
        blocks->push_back(VitBlock(cfg.embed_dim, cfg.num_heads, cfg.mlp_ratio, cfg.adapter_enabled(i), cfg.adapter_ratio));
    neck_conv1 = register_module(
        "neck_conv1", torch::nn::Conv2d(torch::nn::Conv2dOptions(cfg.embed_dim, cfg.out_chans, 1).bias(false)));
    neck_norm1 = register_module("neck_norm1", LayerNorm2d(cfg.out_chans));
    neck_conv2 = register_module(
        "neck_conv2", torch::nn::Conv2d(torch::nn::Conv2dOptions(cfg.out_chans, cfg.out_chans, 3).padding(1).bias(false)));
    neck_norm2 = register_module("neck_norm2", LayerNorm2d(cfg.out_chans));
}

torch::Tensor ImageEncoderImpl::forward(const torch::Tensor& x) {
    if (x.dim() != 4 || x.size(1) != 3 || x.size(2) != cfg.image_size || x.size(3) != cfg.image_size)
        throw shape_error("image encoder expects (B, 3, " + std::to_string(cfg.image_size) + ", " +
                          std::to_string(cfg.image_size) + ")");
    auto t = patch_embed(x).permute({0, 2, 3, 1});  // (B, g, g, C)
    t = t + pos_embed;
    const auto b = t.size(0), g = t.size(1);
    t = t.reshape({b, g * g, cfg.embed_dim});
    for (auto& blk : *blocks) t = blk->as<VitBlock>()->forward(t);
    t = t.reshape({b, g, g, cfg.embed_dim}).permute({0, 3, 1, 2});
    return neck_norm2(neck_conv2(neck_norm1(neck_conv1(t))));
}

PromptEncoderImpl::PromptEncoderImpl(int64_t dim, int64_t grid, int64_t image) : embed_dim(dim), grid_size(grid), image_size(image) {
    if (dim % 2 != 0) throw invalid_argument("prompt embedding dim must be even");
    gaussian = register_buffer("gaussian", torch::randn({2, dim / 2}));
    point_embed = register_parameter("point_embed", torch::randn({1, dim}));
    corner_embed = register_parameter("corner_embed", torch::randn({2, dim}));
    no_prompt_token = register_parameter("no_prompt_token", torch::randn({1, dim}));
    no_mask_embed = register_parameter("no_mask_embed", torch::randn({dim}));
}

torch::Tensor PromptEncoderImpl::encode_coords(const torch::Tensor& xy01) {
    auto c = (2.0 * xy01 - 1.0).to(gaussian.dtype());
    c = torch::matmul(c, gaussian) * (2.0 * std::numbers::pi);
    return torch::cat({torch::sin(c), torch::cos(c)}, -1);
}

torch::Tensor PromptEncoderImpl::dense_pe() {
    auto opts = torch::TensorOptions().dtype(gaussian.dtype());
    auto ys = (torch::arange(grid_size, opts) + 0.5) / static_cast<double>(grid_size);
    auto xs = (torch::arange(grid_size, opts) + 0.5) / static_cast<double>(grid_size);
    auto grid = torch::stack(torch::meshgrid({ys, xs}, "ij"), -1);   // (g, g, [y, x])
    auto xy = torch::stack({grid.select(-1, 1), grid.select(-1, 0)}, -1);  // (g, g, [x, y])
    return encode_coords(xy).permute({2, 0, 1});  // (C, g, g)
}

PromptEmbedding PromptEncoderImpl::forward(const PromptSet* prompts) {
    PromptEmbedding e;
    e.dense = no_mask_embed.view({embed_dim, 1, 1}).expand({embed_dim, grid_size, grid_size});
    if (!prompts) {
        e.sparse = no_prompt_token;
        return e;
    }
    validate_prompts(*prompts, image_size, image_size);
    const double s = static_cast<double>(image_size);
    auto opts = torch::TensorOptions().dtype(gaussian.dtype());
    if (prompts->kind == PromptKind::Points) {
        std::vector<double> xy;
        for (const auto& p : prompts->points) {
            xy.push_back((p.x + 0.5) / s);
            xy.push_back((p.y + 0.5) / s);
        }
        auto coords = torch::tensor(xy, torch::kFloat64).view({-1, 2}).to(opts.dtype());
        e.sparse = encode_coords(coords) + point_embed;
    } else {
        std::vector<double> xy;
        for (const auto& b : prompts->boxes) {
            xy.insert(xy.end(), {b.x_min / s, b.y_min / s, b.x_max / s, b.y_max / s});
        }
        auto coords = torch::tensor(xy, torch::kFloat64).view({-1, 2, 2}).to(opts.dtype());
        e.sparse = (encode_coords(coords) + corner_embed).reshape({-1, embed_dim});
    }
    return e;
}

TwoWayBlockImpl::TwoWayBlockImpl(int64_t dim, int64_t heads, int64_t mlp_dim, int64_t downsample, bool skip_first,
                                 bool with_adapters, double ratio)
    : skip_first_pe(skip_first) {
    self_attn = register_module("self_attn", Attention(dim, heads));
    norm1 = register_module("norm1", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
    cross_token_to_image = register_module("cross_token_to_image", Attention(dim, heads, dim / downsample));
    norm2 = register_module("norm2", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
    mlp = register_module("mlp", Mlp(dim, mlp_dim));
    norm3 = register_module("norm3", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
    norm4 = register_module("norm4", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
    cross_image_to_token = register_module("cross_image_to_token", Attention(dim, heads, dim / downsample));
    if (with_adapters) {
        adapter_self = register_module("adapter_self", Adapter(dim, ratio));
        adapter_t2i = register_module("adapter_t2i", Adapter(dim, ratio));
        adapter_mlp = register_module("adapter_mlp", Adapter(dim, ratio));
        adapter_i2t = register_module("adapter_i2t", Adapter(dim, ratio));
    }
}

std::pair<torch::Tensor, torch::Tensor> TwoWayBlockImpl::forward(torch::Tensor queries, torch::Tensor keys,
                                                                 const torch::Tensor& query_pe,
                                                                 const torch::Tensor& key_pe) {
    auto adapt = [](Adapter& a, const torch::Tensor& x) { return a ? a(x) : x; };
    if (skip_first_pe) {
        queries = adapt(adapter_self, self_attn(queries, queries, queries));
    } else {
        auto q = queries + query_pe;
        queries = queries + adapt(adapter_self, self_attn(q, q, queries));
    }
    queries = norm1(queries);

    auto q = queries + query_pe;
    auto k = keys + key_pe;
    queries = norm2(queries + adapt(adapter_t2i, cross_token_to_image(q, k, keys)));

    queries = norm3(queries + adapt(adapter_mlp, mlp(queries)));

    q = queries + query_pe;
    k = keys + key_pe;
    keys = norm4(keys + adapt(adapter_i2t, cross_image_to_token(k, q, queries)));
    return {queries, keys};
}

MaskDecoderImpl::MaskDecoderImpl(const DecoderConfig& c, int64_t dim, int64_t image) : cfg(c), embed_dim(dim), image_size(image) {
    if (dim % 8 != 0) throw invalid_argument("decoder embedding dim must be divisible by 8");
    mask_tokens = register_parameter("mask_tokens", torch::randn({cfg.num_classes, dim}));
    layers = register_module("layers", torch::nn::ModuleList());
    for (int64_t i = 0; i < cfg.depth; ++i)
        layers->push_back(TwoWayBlock(dim, cfg.num_heads, cfg.mlp_dim, cfg.attention_downsample, i == 0, cfg.adapters,
                                      cfg.adapter_ratio));
    final_attn = register_module("final_attn", Attention(dim, cfg.num_heads, dim / cfg.attention_downsample));
    norm_final = register_module("norm_final", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
    upscale1 = register_module("output_upscaling_1",
                               torch::nn::ConvTranspose2d(torch::nn::ConvTranspose2dOptions(dim, dim / 4, 2).stride(2)));
    upscale_norm = register_module("output_upscaling_norm", LayerNorm2d(dim / 4));
    upscale2 = register_module("output_upscaling_2",
                               torch::nn::ConvTranspose2d(torch::nn::ConvTranspose2dOptions(dim / 4, dim / 8, 2).stride(2)));
    hypernetworks = register_module("output_hypernetworks", torch::nn::ModuleList());
    for (int64_t i = 0; i < cfg.num_classes; ++i) {
        torch::nn::Sequential mlp(torch::nn::Linear(dim, dim), torch::nn::ReLU(), torch::nn::Linear(dim, dim),
                                  torch::nn::ReLU(), torch::nn::Linear(dim, dim / 8));
        hypernetworks->push_back(mlp);
    }
}

torch::Tensor MaskDecoderImpl::run(const torch::Tensor& src_in, const torch::Tensor& pos, const torch::Tensor& tokens) {
    const auto b = src_in.size(0), c = src_in.size(1), h = src_in.size(2), w = src_in.size(3);
    auto keys = src_in.flatten(2).permute({0, 2, 1});
    auto key_pe = pos.flatten(2).permute({0, 2, 1});
    auto queries = tokens;
    for (auto& layer : *layers) {
        auto [q, k] = layer->as<TwoWayBlock>()->forward(queries, keys, tokens, key_pe);
        queries = q;
        keys = k;
    }
    auto q = queries + tokens;
    auto k = keys + key_pe;
    queries = norm_final(queries + final_attn(q, k, keys));

    auto src = keys.transpose(1, 2).reshape({b, c, h, w});
    auto up = torch::gelu(upscale2(torch::gelu(upscale_norm(upscale1(src)))));  // (B, C/8, 4h, 4w)
    std::vector<torch::Tensor> hyper;
    for (int64_t i = 0; i < cfg.num_classes; ++i)
        hyper.push_back(hypernetworks[static_cast<size_t>(i)]->as<torch::nn::Sequential>()->forward(queries.select(1, i)));
    auto hyper_in = torch::stack(hyper, 1);  // (B, C_Y, C/8)
    auto masks = torch::matmul(hyper_in, up.flatten(2)).view({b, cfg.num_classes, up.size(2), up.size(3)});
    return F::interpolate(masks, F::InterpolateFuncOptions()
                                     .size(std::vector<int64_t>{image_size, image_size})
                                     .mode(torch::kBilinear)
                                     .align_corners(false));
}

torch::Tensor MaskDecoderImpl::forward(const torch::Tensor& image, const torch::Tensor& image_pe,
                                       const std::vector<PromptEmbedding>& prompts) {
    if (image.dim() != 4 || image.size(1) != embed_dim)
        throw shape_error("mask decoder expects (B, " + std::to_string(embed_dim) + ", H, W) embeddings");
    const auto b = image.size(0);
    if (static_cast<int64_t>(prompts.size()) != b) throw shape_error("one prompt embedding per image required");
    bool uniform = true;
    for (const auto& p : prompts) uniform = uniform && p.sparse.size(0) == prompts.front().sparse.size(0);

    auto pos = image_pe.unsqueeze(0);
    if (uniform) {
        std::vector<torch::Tensor> sparse, dense;
        for (const auto& p : prompts) {
            sparse.push_back(p.sparse);
            dense.push_back(p.dense);
        }
        auto tokens = torch::cat({mask_tokens.unsqueeze(0).expand({b, -1, -1}), torch::stack(sparse)}, 1);
        return run(image + torch::stack(dense), pos.expand({b, -1, -1, -1}), tokens);
    }
    std::vector<torch::Tensor> out;
    for (int64_t i = 0; i < b; ++i) {
        const auto& p = prompts[static_cast<size_t>(i)];
        auto tokens = torch::cat({mask_tokens, p.sparse}, 0).unsqueeze(0);
        out.push_back(run(image.narrow(0, i, 1) + p.dense.unsqueeze(0), pos, tokens));
    }
    return torch::cat(out, 0);
}

// --- Sam2d -----------------------------------------------------------------

Sam2dImpl::Sam2dImpl(const Sam2dConfig& c) : cfg(c) {
    cfg.encoder.validate();
    image_encoder = register_module("image_encoder", ImageEncoder(cfg.encoder));
    prompt_encoder = register_module("prompt_encoder",
                                     PromptEncoder(cfg.encoder.out_chans, cfg.encoder.grid_size(), cfg.encoder.image_size));
    mask_decoder = register_module("mask_decoder", MaskDecoder(cfg.decoder, cfg.encoder.out_chans, cfg.encoder.image_size));
    fusion = register_module("fusion", FusionGate(cfg.encoder.out_chans));
}

torch::Tensor Sam2dImpl::encode_image(const torch::Tensor& x) { return image_encoder(x); }

PromptEmbedding Sam2dImpl::encode_prompts(const PromptSet* prompts) { return prompt_encoder(prompts); }

torch::Tensor Sam2dImpl::decode_masks(const torch::Tensor& z, const std::vector<PromptEmbedding>& prompts) {
    if (z.size(2) != cfg.encoder.grid_size() || z.size(3) != cfg.encoder.grid_size())
        throw shape_error("image embedding grid does not match the configured encoder");
    return mask_decoder(z, prompt_encoder->dense_pe(), prompts);
}

torch::Tensor Sam2dImpl::maybe_fuse(const torch::Tensor& z, const torch::Tensor& attention,
                                    std::optional<double> gate_override) {
    if (!attention.defined()) return z;
    if (gate_override && *gate_override == 1.0) return z;
    return fusion(z, attention, gate_override);
}

torch::Tensor Sam2dImpl::forward(const torch::Tensor& x, const std::vector<const PromptSet*>& prompts,
                                 const torch::Tensor& attention, std::optional<double> gate_override) {
    const auto b = x.size(0);
    if (!prompts.empty() && static_cast<int64_t>(prompts.size()) != b)
        throw shape_error("prompt list must be empty or have one entry per image");
    if (attention.defined() && attention.size(0) != b) throw shape_error("one attention map per image required");
    auto z = maybe_fuse(encode_image(x), attention, gate_override);
    std::vector<PromptEmbedding> pe;
    pe.reserve(static_cast<size_t>(b));
    for (int64_t i = 0; i < b; ++i) pe.push_back(encode_prompts(prompts.empty() ? nullptr : prompts[static_cast<size_t>(i)]));
    return decode_masks(z, pe);
}

void Sam2dImpl::set_adapters_enabled(bool enabled) {
    for (auto& m : modules(false))
        if (auto* a = m->as<AdapterImpl>()) a->enabled = enabled;
}

bool is_adapter_parameter(const std::string& n) { return n.find("adapter_") != std::string::npos; }
bool is_encoder_parameter(const std::string& n) { return n.rfind("image_encoder.", 0) == 0; }
bool is_fusion_parameter(const std::string& n) { return n.rfind("fusion.", 0) == 0; }
bool is_decoder_parameter(const std::string& n) { return n.rfind("mask_decoder.", 0) == 0; }
bool is_prompt_encoder_parameter(const std::string& n) { return n.rfind("prompt_encoder.", 0) == 0; }
bool is_output_head_parameter(const std::string& n) {
    return n.rfind("mask_decoder.mask_tokens", 0) == 0 || n.rfind("mask_decoder.output_", 0) == 0;
}

ModelBundle to_bundle(Sam2d& model, const std::string& stage, uint64_t seed, const json& provenance) {
    ModelBundle b;
    export_module(*model, b);
    b.cfg = json{{"model", to_json(model->cfg)}};
    b.stage = stage;
    b.seed = seed;
    b.provenance = provenance.is_object() ? provenance : json::object();
    return b;
}

Sam2d sam2d_from_bundle(const ModelBundle& b) {
    if (!b.cfg.contains("model")) throw format_error("checkpoint has no 2D model config");
    Sam2d model(sam2d_config_from_json(b.cfg["model"]));
    import_module(*model, b, true);
    model->eval();
    return model;
}

LoadReport load_pretrained(Sam2d& model, const ModelBundle& b, bool strict) {
    return import_module(*model, b, strict);
}

torch::Tensor slice_input(const FloatPlane& slice, int64_t image_size) {
    return to_tensor(normalize_for_encoder(slice, image_size));
}

}  // namespace sabone
