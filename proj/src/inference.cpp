#include "sabone/inference.hpp"

#include <algorithm>

#include "sabone/error.hpp"
#include "sabone/volume.hpp"

namespace sabone {

FloatPlane attention_plane(const Grid3<float>& stack, int64_t k, int64_t height, int64_t width) {
    const auto& s = stack.shape();
    if (k < 0 || k >= s.depth) throw range_error("attention slice " + std::to_string(k) + " out of range");
    FloatPlane lr(s.height, s.width);
    auto src = stack.plane(k);
    std::copy(src.begin(), src.end(), lr.data().begin());
    return resize_bilinear(lr, height, width);
}

std::string attention_stem(const std::filesystem::path& volume_path) {
    return archive_paths(volume_path).header.stem().string();
}

Grid3<float> AttentionSource::stack_for(const Volume& v, const std::string& stem) const {
    if (!dir.empty()) {
        const bool present = std::filesystem::exists(attention_header_path(dir, stem));
        if (present || vnet.is_empty()) {
            auto f = load_attention_file(dir, stem);
            if (f.maps.shape().depth != v.shape().depth)
                throw shape_error("attention file " + stem + " does not match the volume depth");
            return std::move(f.maps);
        }
    }
    if (vnet.is_empty()) throw io_error("no attention source configured for " + stem);
    VNet net = vnet;
    return compute_attention_stack(predict_probability_volume(net, v), v.shape().depth, cfg);
}

torch::Tensor image_batch(const std::vector<SliceInput>& inputs, int64_t image_size) {
    std::vector<torch::Tensor> xs;
    xs.reserve(inputs.size());
    for (const auto& in : inputs) xs.push_back(slice_input(in.image, image_size));
    return torch::stack(xs);
}

torch::Tensor attention_batch(const std::vector<FloatPlane>& planes, int64_t image_size) {
    std::vector<torch::Tensor> as;
    as.reserve(planes.size());
    for (const auto& p : planes) as.push_back(to_tensor(resize_bilinear(p, image_size, image_size)).unsqueeze(0));
    return torch::stack(as);
}

torch::Tensor predict_logits(Sam2d& model, const std::vector<SliceInput>& inputs, std::optional<double> gate_override) {
    if (inputs.empty()) throw invalid_argument("no slices to segment");
    const auto s = model->cfg.encoder.image_size;
    const bool was_training = model->is_training();
    if (was_training) model->eval();
    torch::NoGradGuard no_grad;

    std::vector<PromptSet> scaled;
    scaled.reserve(inputs.size());
    std::vector<const PromptSet*> prompts;
    bool any_prompt = false;
    for (const auto& in : inputs) {
        if (in.prompts) {
            scaled.push_back(rescale_prompts(*in.prompts, in.image.height(), in.image.width(), s, s));
            prompts.push_back(&scaled.back());
            any_prompt = true;
        } else {
            prompts.push_back(nullptr);
        }
    }
    if (!any_prompt) prompts.clear();

    torch::Tensor attention;
    const bool all_attn = std::all_of(inputs.begin(), inputs.end(), [](const SliceInput& in) { return in.attention.has_value(); });
    const bool any_attn = std::any_of(inputs.begin(), inputs.end(), [](const SliceInput& in) { return in.attention.has_value(); });
    if (any_attn && !all_attn) throw invalid_argument("attention must be given for every slice of a batch or none");
    if (all_attn) {
        std::vector<FloatPlane> planes;
        for (const auto& in : inputs) planes.push_back(*in.attention);
        attention = attention_batch(planes, s);
    }
    auto logits = model->forward(image_batch(inputs, s), prompts, attention, gate_override);
    if (was_training) model->train();
    return logits;
}

std::vector<MaskPlane> predict_slices(Sam2d& model, const std::vector<SliceInput>& inputs,
                                      std::optional<double> gate_override) {
    auto labels = predict_logits(model, inputs, gate_override).argmax(1).to(torch::kUInt8);
    std::vector<MaskPlane> out;
    out.reserve(inputs.size());
    for (size_t i = 0; i < inputs.size(); ++i) {
        auto m = to_mask_plane(labels[static_cast<int64_t>(i)]);
        out.push_back(resize_nearest(m, inputs[i].image.height(), inputs[i].image.width()));
    }
    return out;
}

std::string to_string(EvalMode m) {
    switch (m) {
        case EvalMode::Auto: return "auto";
        case EvalMode::PromptedOracle: return "prompted-oracle";
        case EvalMode::TwoDOnly: return "2d-only";
    }
    return "?";
}

EvalMode eval_mode_from_string(const std::string& s) {
    if (s == "auto") return EvalMode::Auto;
    if (s == "prompted-oracle") return EvalMode::PromptedOracle;
    if (s == "2d-only") return EvalMode::TwoDOnly;
    throw invalid_argument("unknown evaluation mode '" + s + "' (auto, prompted-oracle, 2d-only)");
}

MaskVolume predict_volume(Sam2d& model, const Volume& v, const Grid3<float>* attention, EvalMode mode,
                          const MaskVolume* gt, int64_t batch_size) {
    if (batch_size < 1) throw invalid_argument("batch size must be positive");
    if (mode == EvalMode::PromptedOracle && !gt) throw invalid_argument("prompted-oracle mode needs the ground truth");
    if (gt) validate_pair(v, *gt);
    const auto shape = v.shape();
    if (attention && attention->shape().depth != shape.depth) throw shape_error("attention depth differs from volume depth");
    const std::optional<double> gate = mode == EvalMode::TwoDOnly ? std::optional<double>(1.0) : std::nullopt;

    MaskVolume out{Grid3<uint8_t>(shape), {}};
    for (int64_t k0 = 0; k0 < shape.depth; k0 += batch_size) {
        const auto k1 = std::min(shape.depth, k0 + batch_size);
        std::vector<SliceInput> inputs;
        std::vector<PromptSet> prompts;
        prompts.reserve(static_cast<size_t>(k1 - k0));
        for (int64_t k = k0; k < k1; ++k) {
            SliceInput in{extract_slice(v, k), nullptr, std::nullopt};
            if (attention) in.attention = attention_plane(*attention, k, shape.height, shape.width);
            inputs.push_back(std::move(in));
            if (mode == EvalMode::PromptedOracle) {
                auto g = extract_mask_slice(*gt, k);
                auto p = centroid_prompts(g);
                if (!p.points.empty()) {
                    prompts.push_back(std::move(p));
                    inputs.back().prompts = &prompts.back();
                }
            }
        }
        auto masks = predict_slices(model, inputs, gate);
        for (int64_t k = k0; k < k1; ++k) {
            const auto& m = masks[static_cast<size_t>(k - k0)].data();
            auto dst = out.data.plane(k);
            std::copy(m.begin(), m.end(), dst.begin());
        }
    }
    return out;
}

}  // namespace sabone
