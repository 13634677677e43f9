#include "sabone/attention.hpp"

#include <algorithm>
#include <cmath>
#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "sabone/error.hpp"

namespace sabone {

namespace fs = std::filesystem;
using nlohmann::json;

void AttentionConfig::validate() const {
    if (!(p_low > 0 && p_low < p_high && p_high < 1)) throw invalid_argument("attention cfg needs 0 < p_low < p_high < 1");
    if (depth_window < 1) throw invalid_argument("attention depth window must be >= 1");
}

json to_json(const AttentionConfig& c) {
    return json{{"eps_attn", c.eps_attn},
                {"depth_window", c.depth_window},
                {"p_low", c.p_low},
                {"p_high", c.p_high},
                {"alpha1", c.alpha1()},
                {"alpha2", c.alpha2()},
                {"eps_rescale", c.eps_rescale},
                {"rescale_mode", c.rescale_mode == RescaleMode::Literal ? "literal" : "continuous"}};
}

AttentionConfig attention_config_from_json(const json& j, AttentionConfig c) {
    c.eps_attn = j.value("eps_attn", c.eps_attn);
    c.depth_window = j.value("depth_window", c.depth_window);
    c.p_low = j.value("p_low", c.p_low);
    c.p_high = j.value("p_high", c.p_high);
    c.eps_rescale = j.value("eps_rescale", c.eps_rescale);
    if (j.contains("rescale_mode")) {
        const auto m = j["rescale_mode"].get<std::string>();
        if (m == "literal") c.rescale_mode = RescaleMode::Literal;
        else if (m == "continuous") c.rescale_mode = RescaleMode::Continuous;
        else throw invalid_argument("unknown rescale_mode '" + m + "'");
    }
    c.validate();
    return c;
}

ProbabilityVolume threshold_probabilities(const ProbabilityVolume& pv, double eps) {
    ProbabilityVolume out = pv;
    for (auto& v : out.data())
        if (static_cast<double>(v) <= eps) v = 0.0f;
    return out;
}

int64_t lowres_depth_centre(int64_t k, int64_t original_depth, int64_t lowres_depth) {
    const double c = std::round(static_cast<double>(k) * static_cast<double>(lowres_depth) /
                                static_cast<double>(original_depth));
    return std::clamp<int64_t>(static_cast<int64_t>(c), 0, lowres_depth - 1);
}

AttentionMap accumulate_depth_window(const ProbabilityVolume& pv, int64_t k, int64_t original_depth,
                                     const AttentionConfig& cfg) {
    if (original_depth < 1 || k < 0 || k >= original_depth)
        throw range_error("slice index " + std::to_string(k) + " outside [0," + std::to_string(original_depth) + ")");
    const auto& s = pv.shape();
    const int64_t dc = lowres_depth_centre(k, original_depth, s.depth);
    const int64_t lo = std::max<int64_t>(0, dc - cfg.depth_window / 2);
    const int64_t hi = std::min<int64_t>(s.depth - 1, dc + cfg.depth_window / 2 - 1);
    AttentionMap m{Plane<double>(s.height, s.width, 0.0), k};
    auto& out = m.values.data();
    for (int64_t d = lo; d <= hi; ++d) {
        const auto plane = pv.plane(d);
        for (size_t i = 0; i < out.size(); ++i) out[i] += static_cast<double>(plane[i]);
    }
    return m;
}

AttentionMap normalize_attention(const AttentionMap& abs_map) {
    AttentionMap m = abs_map;
    const double mx = *std::max_element(m.values.data().begin(), m.values.data().end());
    if (mx > 0.0)
        for (auto& v : m.values.data()) v /= mx;
    return m;
}

double rescale_value(double v, const AttentionConfig& cfg) {
    double r;
    if (v <= cfg.p_low) {
        r = cfg.alpha1() * v;
    } else if (cfg.rescale_mode == RescaleMode::Literal) {
        r = cfg.alpha2() * v;
    } else {
        r = cfg.p_high + cfg.alpha2() * (v - cfg.p_low);
    }
    return r <= cfg.eps_rescale ? 0.0 : r;
}

AttentionMap rescale_attention(const AttentionMap& map, const AttentionConfig& cfg) {
    AttentionMap m = map;
    for (auto& v : m.values.data()) v = rescale_value(v, cfg);
    return m;
}

AttentionMap compute_depth_attention(const ProbabilityVolume& pv, int64_t k, int64_t original_depth,
                                     const AttentionConfig& cfg) {
    cfg.validate();
    return rescale_attention(
        normalize_attention(accumulate_depth_window(threshold_probabilities(pv, cfg.eps_attn), k, original_depth, cfg)),
        cfg);
}

Grid3<float> compute_attention_stack(const ProbabilityVolume& pv, int64_t original_depth, const AttentionConfig& cfg) {
    cfg.validate();
    const auto thresholded = threshold_probabilities(pv, cfg.eps_attn);
    const auto& s = pv.shape();
    Grid3<float> out(Shape3{original_depth, s.height, s.width});
    for (int64_t k = 0; k < original_depth; ++k) {
        const auto m = rescale_attention(normalize_attention(accumulate_depth_window(thresholded, k, original_depth, cfg)), cfg);
        auto dst = out.plane(k);
        for (size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<float>(m.values.data()[i]);
    }
    return out;
}

fs::path attention_header_path(const fs::path& dir, const std::string& stem) { return dir / (stem + ".attn.json"); }

void save_attention_file(const fs::path& dir, const std::string& stem, const Grid3<float>& maps,
                         const AttentionConfig& cfg, const json& extra) {
    fs::create_directories(dir);
    const auto& s = maps.shape();
    json meta = extra.is_object() ? extra : json::object();
    meta["shape"] = {s.depth, s.height, s.width};
    meta["dtype"] = "f32le";
    meta["cfg"] = to_json(cfg);
    {
        std::ofstream raw(dir / (stem + ".attn.raw"), std::ios::binary | std::ios::trunc);
        if (!raw) throw io_error("cannot write attention payload for " + stem);
        static_assert(std::endian::native == std::endian::little, "attention payload assumes little-endian host");
        raw.write(reinterpret_cast<const char*>(maps.data().data()),
                  static_cast<std::streamsize>(maps.data().size() * sizeof(float)));
    }
    std::ofstream hdr(attention_header_path(dir, stem));
    if (!hdr) throw io_error("cannot write attention header for " + stem);
    hdr << meta.dump(2) << '\n';
}

AttentionFile load_attention_file(const fs::path& dir, const std::string& stem) {
    const auto hp = attention_header_path(dir, stem);
    std::ifstream hdr(hp);
    if (!hdr) throw io_error("missing attention file " + hp.string());
    AttentionFile f;
    try {
        hdr >> f.meta;
    } catch (const json::exception& e) {
        throw format_error("attention header " + hp.string() + ": " + e.what());
    }
    const auto shape = f.meta.at("shape").get<std::vector<int64_t>>();
    if (shape.size() != 3) throw format_error("attention shape must have 3 entries");
    const Shape3 s{shape[0], shape[1], shape[2]};
    std::ifstream raw(dir / (stem + ".attn.raw"), std::ios::binary);
    if (!raw) throw io_error("missing attention payload for " + stem);
    std::ostringstream ss;
    ss << raw.rdbuf();
    const auto bytes = ss.str();
    if (bytes.size() != static_cast<size_t>(s.voxels()) * sizeof(float))
        throw format_error("attention payload size mismatch for " + stem);
    std::vector<float> data(static_cast<size_t>(s.voxels()));
    std::memcpy(data.data(), bytes.data(), bytes.size());
    f.maps = Grid3<float>(s, std::move(data));
    return f;
}

}  // namespace sabone
