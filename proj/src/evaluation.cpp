#include "sabone/evaluation.hpp"

#include <fstream>
#include <map>

#include "sabone/error.hpp"
#include "sabone/log.hpp"

namespace sabone {

using nlohmann::json;

json to_json(const EvalConfig& c) {
    return json{{"mode", to_string(c.mode)},
                {"use_attention", c.use_attention},
                {"batch_size", c.batch_size},
                {"resamples", c.resamples},
                {"seed", c.seed}};
}

EvalConfig eval_config_from_json(const json& j, EvalConfig c) {
    if (j.contains("mode")) c.mode = eval_mode_from_string(j["mode"].get<std::string>());
    c.use_attention = j.value("use_attention", c.use_attention);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.resamples = j.value("resamples", c.resamples);
    c.seed = j.value("seed", c.seed);
    return c;
}

json to_json(const EvalReport& r) {
    json vols = json::array();
    for (const auto& v : r.volumes)
        vols.push_back({{"id", v.id},
                        {"location_tag", v.location_tag},
                        {"sequence_tag", v.sequence_tag},
                        {"dsc", v.dsc},
                        {"iou", v.iou}});
    json locs = json::object();
    for (const auto& l : r.locations)
        locs[l.location_tag] = {{"count", l.count},
                                {"mean_dsc", l.mean_dsc},
                                {"mean_iou", l.mean_iou},
                                {"ci95_dsc", {l.ci95_dsc.lo, l.ci95_dsc.hi}},
                                {"ci95_iou", {l.ci95_iou.lo, l.ci95_iou.hi}}};
    return json{{"volumes", vols},
                {"locations", locs},
                {"global", {{"mean_dsc", r.mean_dsc}, {"mean_iou", r.mean_iou}, {"count", r.volumes.size()}}},
                {"config", r.config}};
}

EvalReport eval_report_from_json(const json& j) {
    EvalReport r;
    try {
        for (const auto& v : j.at("volumes"))
            r.volumes.push_back({v.at("id"), v.at("location_tag"), v.at("sequence_tag"), v.at("dsc"), v.at("iou")});
        for (const auto& [tag, l] : j.at("locations").items()) {
            LocationSummary s;
            s.location_tag = tag;
            s.count = l.at("count");
            s.mean_dsc = l.at("mean_dsc");
            s.mean_iou = l.at("mean_iou");
            s.ci95_dsc = {l.at("ci95_dsc").at(0), l.at("ci95_dsc").at(1)};
            s.ci95_iou = {l.at("ci95_iou").at(0), l.at("ci95_iou").at(1)};
            r.locations.push_back(s);
        }
        r.mean_dsc = j.at("global").at("mean_dsc");
        r.mean_iou = j.at("global").at("mean_iou");
        r.config = j.value("config", json::object());
    } catch (const json::exception& e) {
        throw format_error(std::string("malformed evaluation report: ") + e.what());
    }
    return r;
}

void save_report(const EvalReport& r, const std::filesystem::path& path) {
    std::ofstream f(path);
    if (!f) throw io_error("cannot write " + path.string());
    f << to_json(r).dump(2) << "\n";
}

void save_report_csv(const EvalReport& r, const std::filesystem::path& path) {
    std::ofstream f(path);
    if (!f) throw io_error("cannot write " + path.string());
    f.precision(17);
    f << "id,location_tag,sequence_tag,dsc,iou\n";
    for (const auto& v : r.volumes)
        f << v.id << ',' << v.location_tag << ',' << v.sequence_tag << ',' << v.dsc << ',' << v.iou << '\n';
}

VolumeResult score_volume(const MaskVolume& pred, const MaskVolume& gt) {
    if (!(pred.shape() == gt.shape())) throw shape_error("prediction and ground truth volumes differ in shape");
    const auto o = count_overlap(pred.data.data(), gt.data.data());
    VolumeResult r;
    r.dsc = dsc(o);
    r.iou = iou(o);
    return r;
}

VolumeResult evaluate_volume(Sam2d& model, const Volume& v, const MaskVolume& gt, const Grid3<float>* attention,
                             const EvalConfig& cfg) {
    auto pred = predict_volume(model, v, attention, cfg.mode, &gt, cfg.batch_size);
    auto r = score_volume(pred, gt);
    r.location_tag = v.location_tag;
    r.sequence_tag = v.sequence_tag;
    return r;
}

namespace {

uint64_t tag_seed(uint64_t seed, const std::string& tag) {
    uint64_t h = 1469598103934665603ull;
    for (unsigned char c : tag) h = (h ^ c) * 1099511628211ull;
    return seed ^ h;
}

}  // namespace

EvalReport summarize(std::vector<VolumeResult> rows, const EvalConfig& cfg) {
    if (rows.empty()) throw invalid_argument("nothing to evaluate: empty split");
    EvalReport r;
    r.volumes = std::move(rows);
    std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> groups;
    std::vector<double> all_d, all_i;
    for (const auto& v : r.volumes) {
        groups[v.location_tag].first.push_back(v.dsc);
        groups[v.location_tag].second.push_back(v.iou);
        all_d.push_back(v.dsc);
        all_i.push_back(v.iou);
    }
    for (const auto& [tag, g] : groups) {
        LocationSummary s;
        s.location_tag = tag;
        s.count = static_cast<int64_t>(g.first.size());
        s.mean_dsc = mean(g.first);
        s.mean_iou = mean(g.second);
        s.ci95_dsc = bootstrap_mean_ci(g.first, cfg.resamples, tag_seed(cfg.seed, tag));
        s.ci95_iou = bootstrap_mean_ci(g.second, cfg.resamples, tag_seed(cfg.seed, tag) + 1);
        r.locations.push_back(s);
    }
    r.mean_dsc = mean(all_d);
    r.mean_iou = mean(all_i);
    r.config = to_json(cfg);
    return r;
}

EvalReport evaluate_dataset(Sam2d& model, const std::vector<Sample>& samples, const AttentionSource& source,
                            const EvalConfig& cfg) {
    if (samples.empty()) throw invalid_argument("nothing to evaluate: empty split");
    const bool fused = cfg.use_attention && source.enabled();
    std::vector<VolumeResult> rows;
    for (const auto& s : samples) {
        std::optional<Grid3<float>> attn;
        const auto stem = attention_stem(s.entry.volume);
        if (fused) attn = source.stack_for(s.volume, stem);
        auto row = evaluate_volume(model, s.volume, s.mask, attn ? &*attn : nullptr, cfg);
        row.id = stem;
        row.location_tag = s.entry.location_tag.empty() ? s.volume.location_tag : s.entry.location_tag;
        row.sequence_tag = s.entry.sequence_tag.empty() ? s.volume.sequence_tag : s.entry.sequence_tag;
        log::info("eval.volume", {{"id", row.id}, {"dsc", row.dsc}, {"iou", row.iou}, {"mode", to_string(cfg.mode)}});
        rows.push_back(std::move(row));
    }
    auto report = summarize(std::move(rows), cfg);
    report.config["fused"] = fused;
    return report;
}

}  // namespace sabone
