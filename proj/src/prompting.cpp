#include "sabone/prompting.hpp"

#include <algorithm>
#include <limits>

#include <nlohmann/json.hpp>

#include "sabone/error.hpp"

namespace sabone {

using nlohmann::json;

void validate_prompts(const PromptSet& p, int64_t height, int64_t width) {
    if (p.kind == PromptKind::Points) {
        if (p.points.empty()) throw invalid_argument("point prompt set is empty");
        for (const auto& pt : p.points)
            if (!(pt.x >= 0 && pt.y >= 0 && pt.x < static_cast<double>(width) && pt.y < static_cast<double>(height)))
                throw range_error("point prompt outside the slice");
    } else {
        if (p.boxes.empty()) throw invalid_argument("box prompt set is empty");
        for (const auto& b : p.boxes) {
            if (!(b.x_min < b.x_max && b.y_min < b.y_max)) throw invalid_argument("box prompt is inverted or empty");
            if (b.x_min < 0 || b.y_min < 0 || b.x_max > static_cast<double>(width) || b.y_max > static_cast<double>(height))
                throw range_error("box prompt outside the slice");
        }
    }
}

PromptSet prompts_from_json(const json& j) {
    PromptSet p;
    try {
        const bool has_points = j.contains("points"), has_box = j.contains("box") || j.contains("boxes");
        if (has_points == has_box) throw invalid_argument("prompt JSON needs exactly one of points or box");
        if (has_points) {
            p.kind = PromptKind::Points;
            for (const auto& xy : j.at("points")) {
                if (!xy.is_array() || xy.size() != 2) throw invalid_argument("points must be [x,y] pairs");
                p.points.push_back({xy[0].get<double>(), xy[1].get<double>()});
            }
        } else {
            p.kind = PromptKind::Box;
            auto to_box = [](const json& b) {
                if (!b.is_array() || b.size() != 4) throw invalid_argument("box must be [x0,y0,x1,y1]");
                return PromptBox{b[0].get<double>(), b[1].get<double>(), b[2].get<double>(), b[3].get<double>()};
            };
            if (j.contains("box")) p.boxes.push_back(to_box(j.at("box")));
            if (j.contains("boxes"))
                for (const auto& b : j.at("boxes")) p.boxes.push_back(to_box(b));
        }
    } catch (const json::exception& e) {
        throw invalid_argument(std::string("malformed prompt JSON: ") + e.what());
    }
    return p;
}

json to_json(const PromptSet& p) {
    if (p.kind == PromptKind::Points) {
        json pts = json::array();
        for (const auto& pt : p.points) pts.push_back({pt.x, pt.y});
        return json{{"points", pts}};
    }
    if (p.boxes.size() == 1) {
        const auto& b = p.boxes[0];
        return json{{"box", {b.x_min, b.y_min, b.x_max, b.y_max}}};
    }
    json boxes = json::array();
    for (const auto& b : p.boxes) boxes.push_back({b.x_min, b.y_min, b.x_max, b.y_max});
    return json{{"boxes", boxes}};
}

PromptSet rescale_prompts(const PromptSet& p, int64_t from_h, int64_t from_w, int64_t to_h, int64_t to_w) {
    const double sy = static_cast<double>(to_h) / from_h, sx = static_cast<double>(to_w) / from_w;
    PromptSet r;
    r.kind = p.kind;
    // Points address pixel centres, boxes pixel edges.
    for (const auto& pt : p.points)
        r.points.push_back({std::min((pt.x + 0.5) * sx - 0.5, to_w - 0.5), std::min((pt.y + 0.5) * sy - 0.5, to_h - 0.5)});
    for (const auto& b : p.boxes) r.boxes.push_back({b.x_min * sx, b.y_min * sy, b.x_max * sx, b.y_max * sy});
    for (auto& pt : r.points) {
        pt.x = std::max(pt.x, 0.0);
        pt.y = std::max(pt.y, 0.0);
    }
    return r;
}

std::vector<Component> find_components(const MaskPlane& mask) {
    const int64_t H = mask.height(), W = mask.width();
    std::vector<int32_t> label(static_cast<size_t>(H * W), -1);
    std::vector<Component> comps;
    std::vector<int64_t> stack;
    for (int64_t start = 0; start < H * W; ++start) {
        if (!mask.data()[static_cast<size_t>(start)] || label[static_cast<size_t>(start)] >= 0) continue;
        const auto id = static_cast<int32_t>(comps.size());
        Component c;
        c.min_row = c.min_col = std::numeric_limits<int64_t>::max();
        c.max_row = c.max_col = -1;
        stack.assign(1, start);
        label[static_cast<size_t>(start)] = id;
        while (!stack.empty()) {
            const int64_t i = stack.back();
            stack.pop_back();
            c.pixels.push_back(i);
            const int64_t r = i / W, col = i % W;
            c.min_row = std::min(c.min_row, r);
            c.max_row = std::max(c.max_row, r);
            c.min_col = std::min(c.min_col, col);
            c.max_col = std::max(c.max_col, col);
            for (int64_t dr = -1; dr <= 1; ++dr)
                for (int64_t dc = -1; dc <= 1; ++dc) {
                    const int64_t rr = r + dr, cc = col + dc;
                    if ((dr || dc) && rr >= 0 && cc >= 0 && rr < H && cc < W) {
                        const int64_t j = rr * W + cc;
                        if (mask.data()[static_cast<size_t>(j)] && label[static_cast<size_t>(j)] < 0) {
                            label[static_cast<size_t>(j)] = id;
                            stack.push_back(j);
                        }
                    }
                }
        }
        std::sort(c.pixels.begin(), c.pixels.end());
        c.mask = MaskPlane(H, W, 0);
        for (int64_t i : c.pixels) c.mask.data()[static_cast<size_t>(i)] = 1;
        comps.push_back(std::move(c));
    }
    std::stable_sort(comps.begin(), comps.end(), [](const Component& a, const Component& b) {
        return a.size() > b.size();
    });
    return comps;
}

json to_json(const PromptConfig& c) {
    return json{{"prompt_probability", c.prompt_probability},
                {"points_probability", c.points_probability},
                {"box_jitter", c.box_jitter}};
}

PromptConfig prompt_config_from_json(const json& j, PromptConfig c) {
    c.prompt_probability = j.value("prompt_probability", c.prompt_probability);
    c.points_probability = j.value("points_probability", c.points_probability);
    c.box_jitter = j.value("box_jitter", c.box_jitter);
    return c;
}

PromptSet sample_prompts(const MaskPlane& gt, Rng& rng, const PromptConfig& cfg) {
    int64_t k = 0;
    return sample_prompts(gt, rng, cfg, k);
}

PromptSet sample_prompts(const MaskPlane& gt, Rng& rng, const PromptConfig& cfg, int64_t& k_out) {
    auto comps = find_components(gt);
    if (comps.empty()) throw invalid_argument("cannot sample prompts from an empty mask");
    const auto n = static_cast<int64_t>(comps.size());
    const int64_t k = std::uniform_int_distribution<int64_t>(1, n)(rng);
    k_out = k;

    // Partial Fisher-Yates: the first k entries are a uniform k-subset.
    std::vector<size_t> idx(comps.size());
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    for (int64_t i = 0; i < k; ++i) {
        const auto j = std::uniform_int_distribution<int64_t>(i, n - 1)(rng);
        std::swap(idx[static_cast<size_t>(i)], idx[static_cast<size_t>(j)]);
    }
    idx.resize(static_cast<size_t>(k));

    PromptSet p;
    p.selected = MaskPlane(gt.height(), gt.width(), 0);
    for (size_t c : idx)
        for (int64_t i : comps[c].pixels) p.selected.data()[static_cast<size_t>(i)] = 1;

    const int64_t W = gt.width(), H = gt.height();
    if (std::bernoulli_distribution(cfg.points_probability)(rng)) {
        p.kind = PromptKind::Points;
        const int64_t m = std::uniform_int_distribution<int64_t>(k, 2 * k)(rng);
        std::vector<size_t> owner(idx.begin(), idx.end());
        for (int64_t i = k; i < m; ++i)
            owner.push_back(idx[static_cast<size_t>(std::uniform_int_distribution<int64_t>(0, k - 1)(rng))]);
        for (size_t c : owner) {
            const auto& px = comps[c].pixels;
            const int64_t flat = px[static_cast<size_t>(std::uniform_int_distribution<size_t>(0, px.size() - 1)(rng))];
            p.points.push_back({static_cast<double>(flat % W), static_cast<double>(flat / W)});
        }
    } else {
        p.kind = PromptKind::Box;
        std::uniform_real_distribution<double> jitter(0.0, cfg.box_jitter);
        for (size_t c : idx) {
            const auto& comp = comps[c];
            const double w = static_cast<double>(comp.max_col - comp.min_col + 1);
            const double h = static_cast<double>(comp.max_row - comp.min_row + 1);
            PromptBox b{static_cast<double>(comp.min_col), static_cast<double>(comp.min_row),
                        static_cast<double>(comp.max_col + 1), static_cast<double>(comp.max_row + 1)};
            b.x_min = std::max(0.0, b.x_min - jitter(rng) * w);
            b.y_min = std::max(0.0, b.y_min - jitter(rng) * h);
            b.x_max = std::min(static_cast<double>(W), b.x_max + jitter(rng) * w);
            b.y_max = std::min(static_cast<double>(H), b.y_max + jitter(rng) * h);
            p.boxes.push_back(b);
        }
    }
    return p;
}

PromptMode hybrid_mode(Rng& rng, double prompt_probability) {
    return std::bernoulli_distribution(prompt_probability)(rng) ? PromptMode::Prompted : PromptMode::Automatic;
}

PromptSet centroid_prompts(const MaskPlane& gt) {
    PromptSet p;
    p.kind = PromptKind::Points;
    p.selected = gt;
    const int64_t W = gt.width();
    for (const auto& c : find_components(gt)) {
        double cy = 0, cx = 0;
        for (int64_t i : c.pixels) {
            cy += static_cast<double>(i / W);
            cx += static_cast<double>(i % W);
        }
        cy /= static_cast<double>(c.size());
        cx /= static_cast<double>(c.size());
        int64_t best = c.pixels.front();
        double best_d = std::numeric_limits<double>::max();
        for (int64_t i : c.pixels) {
            const double dy = static_cast<double>(i / W) - cy, dx = static_cast<double>(i % W) - cx;
            const double d = dy * dy + dx * dx;
            if (d < best_d) best_d = d, best = i;
        }
        p.points.push_back({static_cast<double>(best % W), static_cast<double>(best / W)});
    }
    return p;
}

}  // namespace sabone
