#include "sabone/depth3d.hpp"

#include "sabone/error.hpp"
#include "sabone/torch_util.hpp"

namespace sabone {

namespace F = torch::nn::functional;

FusionGateImpl::FusionGateImpl(int64_t channels) {
    g = register_parameter("g", torch::ones({1}));
    conv1 = register_module("conv1", torch::nn::Conv2d(torch::nn::Conv2dOptions(channels, channels, 3).padding(1)));
    conv2 = register_module("conv2", torch::nn::Conv2d(torch::nn::Conv2dOptions(channels, channels, 3).padding(1)));
}

torch::Tensor FusionGateImpl::transform(const torch::Tensor& x) { return conv2(torch::relu(conv1(x))); }

torch::Tensor FusionGateImpl::forward(const torch::Tensor& z, const torch::Tensor& attention,
                                      std::optional<double> gate_value) {
    if (z.dim() != 4) throw shape_error("fusion expects (B, C, H, W) embeddings");
    if (attention.dim() != 4 || attention.size(1) != 1 || attention.size(0) != z.size(0))
        throw shape_error("fusion expects (B, 1, h, w) attention maps");
    auto a = resize_attention(attention.to(z.dtype()), z.size(2), z.size(3));
    auto fused = transform(z * a);
    if (gate_value) return *gate_value * z + (1.0 - *gate_value) * fused;
    return g * z + (1 - g) * fused;
}

torch::Tensor resize_attention(const torch::Tensor& attention, int64_t height, int64_t width) {
    if (attention.size(2) == height && attention.size(3) == width) return attention;
    return F::interpolate(attention, F::InterpolateFuncOptions()
                                         .size(std::vector<int64_t>{height, width})
                                         .mode(torch::kBilinear)
                                         .align_corners(false));
}

namespace {

torch::nn::Conv3d conv(int64_t in, int64_t out, int64_t k) {
    return torch::nn::Conv3d(torch::nn::Conv3dOptions(in, out, k).padding(k / 2));
}

torch::nn::Conv3d strided(int64_t in, int64_t out) {
    return torch::nn::Conv3d(torch::nn::Conv3dOptions(in, out, 2).stride(2));
}

torch::nn::ConvTranspose3d up(int64_t in, int64_t out) {
    return torch::nn::ConvTranspose3d(torch::nn::ConvTranspose3dOptions(in, out, 2).stride(2));
}

}  // namespace

VNetImpl::VNetImpl(int64_t b) : base(b) {
    if (b < 1) throw invalid_argument("V-net base channels must be positive");
    const int64_t c1 = b, c2 = 2 * b, c3 = 4 * b;
    enc1 = register_module("enc1", conv(1, c1, 3));
    down1 = register_module("down1", strided(c1, c2));
    enc2a = register_module("enc2a", conv(c2, c2, 5));
    enc2b = register_module("enc2b", conv(c2, c2, 5));
    down2 = register_module("down2", strided(c2, c3));
    enc3a = register_module("enc3a", conv(c3, c3, 5));
    enc3b = register_module("enc3b", conv(c3, c3, 5));
    up2 = register_module("up2", up(c3, c2));
    dec2 = register_module("dec2", conv(2 * c2, c2, 5));
    up1 = register_module("up1", up(c2, c1));
    dec1 = register_module("dec1", conv(2 * c1, c1, 3));
    head = register_module("head", torch::nn::Conv3d(torch::nn::Conv3dOptions(c1, 1, 1)));
    auto prelu = [&](const char* name, int64_t ch) {
        return register_module(name, torch::nn::PReLU(torch::nn::PReLUOptions().num_parameters(ch)));
    };
    act1 = prelu("act1", c1);
    act_down1 = prelu("act_down1", c2);
    act2a = prelu("act2a", c2);
    act2b = prelu("act2b", c2);
    act_down2 = prelu("act_down2", c3);
    act3a = prelu("act3a", c3);
    act3b = prelu("act3b", c3);
    act_up2 = prelu("act_up2", c2);
    act_dec2 = prelu("act_dec2", c2);
    act_up1 = prelu("act_up1", c1);
    act_dec1 = prelu("act_dec1", c1);
}

torch::Tensor VNetImpl::forward(const torch::Tensor& x) {
    if (x.dim() != 5 || x.size(1) != 1) throw shape_error("V-net expects (B, 1, D, H, W)");
    for (int i = 2; i < 5; ++i)
        if (x.size(i) % 4 != 0) throw shape_error("V-net spatial dims must be divisible by 4");
    auto l1 = act1(enc1(x) + x);
    auto d1 = act_down1(down1(l1));
    auto l2 = act2b(enc2b(act2a(enc2a(d1))) + d1);
    auto d2 = act_down2(down2(l2));
    auto l3 = act3b(enc3b(act3a(enc3a(d2))) + d2);
    auto u2 = act_up2(up2(l3));
    auto r2 = act_dec2(dec2(torch::cat({u2, l2}, 1)) + u2);
    auto u1 = act_up1(up1(r2));
    auto r1 = act_dec1(dec1(torch::cat({u1, l1}, 1)) + u1);
    return head(r1);
}

ProbabilityVolume vnet_forward(VNet& net, const Volume& lowres) {
    if (!(lowres.data.shape() == kLowRes))
        throw shape_error("V-net input must be 64^3, got " + to_string(lowres.data.shape()));
    const bool was_training = net->is_training();
    if (was_training) net->eval();
    torch::NoGradGuard no_grad;
    auto x = to_tensor(lowres.data).unsqueeze(0).unsqueeze(0);
    auto p = torch::sigmoid(net->forward(x)).squeeze(0).squeeze(0);
    if (was_training) net->train();
    return to_grid(p);
}

ProbabilityVolume predict_probability_volume(VNet& net, const Volume& v) {
    return vnet_forward(net, prepare_lowres(v, nullptr, kLowRes).first);
}

ModelBundle to_bundle(VNet& net, uint64_t seed, const nlohmann::json& provenance) {
    ModelBundle b;
    export_module(*net, b);
    b.cfg = nlohmann::json{{"vnet", {{"base", net->base}}}};
    b.stage = "V3D";
    b.seed = seed;
    b.provenance = provenance.is_object() ? provenance : nlohmann::json::object();
    return b;
}

VNet vnet_from_bundle(const ModelBundle& b) {
    if (!b.cfg.contains("vnet")) throw format_error("checkpoint has no V-net config");
    VNet net(b.cfg["vnet"].value("base", int64_t{8}));
    import_module(*net, b, true);
    net->eval();
    return net;
}

}  // namespace sabone
