#include "sabone/torch_util.hpp"

#include <algorithm>
#include <cstring>

#include "sabone/error.hpp"

namespace sabone {

namespace {

std::vector<std::pair<std::string, torch::Tensor>> named_state(const torch::nn::Module& m) {
    std::vector<std::pair<std::string, torch::Tensor>> out;
    for (const auto& p : m.named_parameters(true)) out.emplace_back(p.key(), p.value());
    for (const auto& b : m.named_buffers(true)) out.emplace_back(b.key(), b.value());
    return out;
}

std::string shape_str(const std::vector<int64_t>& s) {
    std::string r = "[";
    for (size_t i = 0; i < s.size(); ++i) r += (i ? "," : "") + std::to_string(s[i]);
    return r + "]";
}

}  // namespace

void export_module(const torch::nn::Module& m, ModelBundle& into, const std::string& prefix) {
    for (const auto& [name, t] : named_state(m)) {
        auto c = t.detach().to(torch::kCPU, torch::kFloat32).contiguous();
        TensorBlob blob;
        blob.shape = c.sizes().vec();
        blob.values.assign(c.data_ptr<float>(), c.data_ptr<float>() + c.numel());
        into.tensors[prefix + name] = std::move(blob);
    }
}

LoadReport import_module(torch::nn::Module& m, const ModelBundle& from, bool strict, const std::string& prefix) {
    LoadReport r;
    torch::NoGradGuard no_grad;
    std::vector<std::string> known;
    for (auto& [name, t] : named_state(m)) {
        known.push_back(prefix + name);
        auto it = from.tensors.find(prefix + name);
        if (it == from.tensors.end()) {
            r.missing.push_back(prefix + name);
            continue;
        }
        const auto& blob = it->second;
        if (blob.shape != t.sizes().vec())
            throw shape_error("checkpoint tensor '" + prefix + name + "' has shape " + shape_str(blob.shape) +
                              ", model expects " + shape_str(t.sizes().vec()));
        auto src = torch::from_blob(const_cast<float*>(blob.values.data()), blob.shape, torch::kFloat32);
        t.copy_(src.to(t.dtype()));
        r.loaded.push_back(prefix + name);
    }
    for (const auto& [name, blob] : from.tensors)
        if (name.rfind(prefix, 0) == 0 && std::find(known.begin(), known.end(), name) == known.end())
            r.unexpected.push_back(name);
    if (strict && (!r.missing.empty() || !r.unexpected.empty()))
        throw shape_error("strict checkpoint load: " + std::to_string(r.missing.size()) + " missing, " +
                          std::to_string(r.unexpected.size()) + " unexpected tensors" +
                          (r.missing.empty() ? "" : " (first missing: " + r.missing.front() + ")") +
                          (r.unexpected.empty() ? "" : " (first unexpected: " + r.unexpected.front() + ")"));
    return r;
}

std::map<std::string, std::string> parameter_hashes(const torch::nn::Module& m) {
    std::map<std::string, std::string> out;
    for (const auto& p : m.named_parameters(true)) {
        auto c = p.value().detach().to(torch::kCPU).contiguous();
        const auto bytes = std::string_view(static_cast<const char*>(c.data_ptr()), c.numel() * c.element_size());
        out[p.key()] = sha256_hex(bytes);
    }
    return out;
}

std::vector<std::string> changed_parameters(const std::map<std::string, std::string>& before,
                                            const std::map<std::string, std::string>& after) {
    std::vector<std::string> out;
    for (const auto& [name, h] : after) {
        auto it = before.find(name);
        if (it == before.end() || it->second != h) out.push_back(name);
    }
    return out;
}

torch::Tensor to_tensor(const EncoderInput& x) {
    return torch::from_blob(const_cast<float*>(x.data.data()), {x.channels, x.size, x.size}, torch::kFloat32).clone();
}

torch::Tensor to_tensor(const FloatPlane& p) {
    return torch::from_blob(const_cast<float*>(p.data().data()), {p.height(), p.width()}, torch::kFloat32).clone();
}

torch::Tensor to_tensor(const MaskPlane& p) {
    return torch::from_blob(const_cast<uint8_t*>(p.data().data()), {p.height(), p.width()}, torch::kUInt8)
        .to(torch::kFloat32);
}

torch::Tensor to_tensor(const Grid3<float>& g) {
    const auto& s = g.shape();
    return torch::from_blob(const_cast<float*>(g.data().data()), {s.depth, s.height, s.width}, torch::kFloat32).clone();
}

Grid3<float> to_grid(const torch::Tensor& t) {
    if (t.dim() != 3) throw shape_error("expected a 3D tensor");
    auto c = t.detach().to(torch::kCPU, torch::kFloat32).contiguous();
    std::vector<float> data(c.data_ptr<float>(), c.data_ptr<float>() + c.numel());
    return Grid3<float>(Shape3{c.size(0), c.size(1), c.size(2)}, std::move(data));
}

MaskPlane to_mask_plane(const torch::Tensor& t) {
    if (t.dim() != 2) throw shape_error("expected a 2D tensor");
    auto c = t.detach().to(torch::kCPU, torch::kUInt8).contiguous();
    std::vector<uint8_t> data(c.data_ptr<uint8_t>(), c.data_ptr<uint8_t>() + c.numel());
    return MaskPlane(c.size(0), c.size(1), std::move(data));
}

}  // namespace sabone
