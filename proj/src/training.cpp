#include "sabone/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "sabone/error.hpp"
#include "sabone/inference.hpp"
#include "sabone/log.hpp"
#include "sabone/losses.hpp"
#include "sabone/metrics.hpp"
#include "sabone/torch_util.hpp"

namespace sabone {

using nlohmann::json;

std::string to_string(Stage s) {
    switch (s) {
        case Stage::A2D: return "A2D";
        case Stage::V3D: return "V3D";
        case Stage::FUSION: return "FUSION";
    }
    return "?";
}

Stage stage_from_string(const std::string& s) {
    if (s == "A2D") return Stage::A2D;
    if (s == "V3D") return Stage::V3D;
    if (s == "FUSION") return Stage::FUSION;
    throw invalid_argument("unknown stage '" + s + "' (A2D, V3D, FUSION)");
}

void TrainConfig::validate(int64_t total_iterations) const {
    if (!(lr > 0.0) || !std::isfinite(lr)) throw invalid_argument("lr must be positive");
    if (weight_decay < 0.0) throw invalid_argument("weight_decay must be non-negative");
    if (batch_size < 1 || batch_size_3d < 1) throw invalid_argument("batch sizes must be >= 1");
    if (epochs < 1) throw invalid_argument("epochs must be >= 1");
    if (warmup < 0) throw invalid_argument("warmup must be non-negative");
    if (warmup > total_iterations)
        throw invalid_argument("warmup (" + std::to_string(warmup) + ") exceeds the total iteration count (" +
                               std::to_string(total_iterations) + ")");
    if (max_iterations < 0) throw invalid_argument("max_iterations must be non-negative");
    augment.validate();
    attention.validate();
    model.encoder.validate();
}

json to_json(const TrainConfig& c) {
    return json{{"stage", to_string(c.stage)},
                {"batch_size", c.batch_size},
                {"batch_size_3d", c.batch_size_3d},
                {"epochs", c.epochs},
                {"lr", c.lr},
                {"weight_decay", c.weight_decay},
                {"warmup", c.warmup},
                {"seed", c.seed},
                {"augment", to_json(c.augment)},
                {"prompts", to_json(c.prompts)},
                {"attention", to_json(c.attention)},
                {"model", to_json(c.model)},
                {"vnet_base", c.vnet_base},
                {"max_iterations", c.max_iterations}};
}

TrainConfig train_config_from_json(const json& j, TrainConfig c) {
    try {
        if (j.contains("stage")) c.stage = stage_from_string(j["stage"].get<std::string>());
        c.batch_size = j.value("batch_size", c.batch_size);
        c.batch_size_3d = j.value("batch_size_3d", c.batch_size_3d);
        c.epochs = j.value("epochs", c.epochs);
        c.lr = j.value("lr", c.lr);
        c.weight_decay = j.value("weight_decay", c.weight_decay);
        c.warmup = j.value("warmup", c.warmup);
        c.seed = j.value("seed", c.seed);
        if (j.contains("augment")) c.augment = augment_pipeline_from_json(j["augment"]);
        if (j.contains("prompts")) c.prompts = prompt_config_from_json(j["prompts"], c.prompts);
        if (j.contains("attention")) c.attention = attention_config_from_json(j["attention"], c.attention);
        if (j.contains("model")) c.model = sam2d_config_from_json(j["model"], c.model);
        if (j.contains("image_size")) c.model.encoder.image_size = j["image_size"].get<int64_t>();
        c.vnet_base = j.value("vnet_base", c.vnet_base);
        c.max_iterations = j.value("max_iterations", c.max_iterations);
    } catch (const json::exception& e) {
        throw invalid_argument(std::string("malformed training config: ") + e.what());
    }
    return c;
}

double lr_at(const TrainConfig& c, int64_t t) {
    if (t < c.warmup) return c.lr * static_cast<double>(t) / static_cast<double>(c.warmup);
    return c.lr;
}

namespace {

// Independent streams so that, e.g., toggling augmentation leaves the data
// order and the hybrid schedule unchanged.
constexpr uint64_t kOrderStream = 0x0;
constexpr uint64_t kAugmentStream = 0xA5A5'0001;
constexpr uint64_t kModeStream = 0xA5A5'0002;
constexpr uint64_t kPromptStream = 0xA5A5'0003;

Rng stream(uint64_t seed, uint64_t id) { return Rng(seed ^ (id * 0x9E3779B97F4A7C15ull)); }

class JsonLog {
public:
    explicit JsonLog(const std::filesystem::path& p) {
        if (p.empty()) return;
        if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
        out_.open(p, std::ios::trunc);
        if (!out_) throw io_error("cannot write training log " + p.string());
    }
    void write(const json& j) {
        if (out_) out_ << j.dump() << '\n';
    }

private:
    std::ofstream out_;
};

struct SliceRef {
    size_t sample;
    int64_t k;
};

std::vector<SliceRef> all_slices(const std::vector<Sample>& samples) {
    std::vector<SliceRef> refs;
    for (size_t i = 0; i < samples.size(); ++i)
        for (int64_t k = 0; k < samples[i].volume.shape().depth; ++k) refs.push_back({i, k});
    return refs;
}

int64_t iterations_per_epoch(int64_t items, int64_t batch) { return (items + batch - 1) / batch; }

int64_t planned_iterations(const TrainConfig& cfg, int64_t per_epoch) {
    const auto total = per_epoch * cfg.epochs;
    return cfg.max_iterations > 0 ? std::min(total, cfg.max_iterations) : total;
}

struct Batch2d {
    torch::Tensor x;          // (B, 3, S, S)
    torch::Tensor attention;  // (B, 1, S, S) or undefined
    std::vector<MaskPlane> masks;  // (S, S) each
};

Batch2d make_batch(const std::vector<SliceRef>& refs, const std::vector<Sample>& samples,
                   const std::vector<Grid3<float>>* attention, const TrainConfig& cfg, Rng& aug_rng) {
    const auto s = cfg.image_size();
    Batch2d b;
    std::vector<torch::Tensor> xs, as;
    for (const auto& r : refs) {
        const auto& smp = samples[r.sample];
        auto image = extract_slice(smp.volume, r.k);
        auto mask = extract_mask_slice(smp.mask, r.k);
        std::optional<FloatPlane> aux;
        if (attention) aux = attention_plane((*attention)[r.sample], r.k, image.height(), image.width());
        apply_pipeline(cfg.augment, image, mask, aug_rng, aux ? &*aux : nullptr);
        xs.push_back(slice_input(image, s));
        b.masks.push_back(resize_nearest(mask, s, s));
        if (aux) as.push_back(to_tensor(resize_bilinear(*aux, s, s)).unsqueeze(0));
    }
    b.x = torch::stack(xs);
    if (!as.empty()) b.attention = torch::stack(as);
    return b;
}

torch::Tensor target_tensor(const std::vector<MaskPlane>& masks) {
    std::vector<torch::Tensor> ts;
    for (const auto& m : masks) ts.push_back(to_tensor(m));
    return torch::stack(ts);
}

void set_trainable(torch::nn::Module& m, const std::vector<std::string>& names, std::vector<torch::Tensor>& out) {
    for (auto& p : m.named_parameters()) {
        const bool on = std::find(names.begin(), names.end(), p.key()) != names.end();
        p.value().set_requires_grad(on);
        if (on) out.push_back(p.value());
    }
}

void set_lr(torch::optim::AdamW& opt, double lr) {
    for (auto& g : opt.param_groups()) static_cast<torch::optim::AdamWOptions&>(g.options()).lr(lr);
}

void check_finite(const LossParts& l, int64_t iter) {
    const double v = l.total.item<double>();
    if (!std::isfinite(v))
        throw Error(Error::Kind::Divergence, "loss became non-finite at iteration " + std::to_string(iter) +
                                                 " (ce=" + std::to_string(l.ce.item<double>()) +
                                                 ", overlap=" + std::to_string(l.overlap.item<double>()) + ")");
}

std::vector<Grid3<float>> load_stacks(const std::vector<Sample>& samples, const std::filesystem::path& dir) {
    std::vector<Grid3<float>> out;
    AttentionSource src;
    src.dir = dir;
    for (const auto& s : samples) out.push_back(src.stack_for(s.volume, attention_stem(s.entry.volume)));
    return out;
}

double val_dsc_2d(Sam2d& model, const std::vector<Sample>& val, const std::vector<Grid3<float>>* attention,
                  int64_t batch) {
    std::vector<double> scores;
    for (size_t i = 0; i < val.size(); ++i) {
        auto pred = predict_volume(model, val[i].volume, attention ? &(*attention)[i] : nullptr, EvalMode::Auto,
                                   nullptr, batch);
        scores.push_back(dsc(pred.data.data(), val[i].mask.data.data()));
    }
    return mean(scores);
}

json provenance(const TrainConfig& cfg, const TrainResult& r) {
    return json{{"train_config", to_json(cfg)},
                {"best_epoch", r.best_epoch},
                {"best_val_dsc", r.best_val},
                {"iterations", r.iterations}};
}

}  // namespace

std::vector<std::string> trainable_names(Sam2d& model, Stage stage, bool pretrained) {
    std::vector<std::string> names;
    for (const auto& p : model->named_parameters()) {
        const auto& n = p.key();
        bool on = false;
        switch (stage) {
            case Stage::A2D:
                on = pretrained ? (is_adapter_parameter(n) && !is_prompt_encoder_parameter(n)) || is_output_head_parameter(n)
                                : !is_prompt_encoder_parameter(n) && !is_fusion_parameter(n);
                break;
            case Stage::FUSION:
                on = is_fusion_parameter(n) || is_decoder_parameter(n) || is_prompt_encoder_parameter(n);
                break;
            case Stage::V3D:
                break;
        }
        if (on) names.push_back(n);
    }
    return names;
}

TrainResult train_stage_A2D(const TrainConfig& cfg, const std::vector<Sample>& train, const std::vector<Sample>& val,
                            const ModelBundle* pretrained, const TrainHooks& hooks) {
    if (train.empty()) throw invalid_argument("stage A2D: empty training set");
    auto refs = all_slices(train);
    const auto per_epoch = iterations_per_epoch(static_cast<int64_t>(refs.size()), cfg.batch_size);
    cfg.validate(planned_iterations(cfg, per_epoch));

    torch::manual_seed(cfg.seed);
    Sam2d model(cfg.model);
    if (pretrained) {
        auto rep = load_pretrained(model, *pretrained, false);
        log::info("train.pretrained", {{"loaded", rep.loaded.size()}, {"missing", rep.missing.size()}});
    }
    std::vector<torch::Tensor> params;
    set_trainable(*model, trainable_names(model, Stage::A2D, pretrained != nullptr), params);
    torch::optim::AdamW opt(params, torch::optim::AdamWOptions(cfg.lr).weight_decay(cfg.weight_decay));

    auto order_rng = stream(cfg.seed, kOrderStream);
    auto aug_rng = stream(cfg.seed, kAugmentStream);
    JsonLog tlog(hooks.log_path);
    log::info("train.start", {{"stage", "A2D"}, {"config", to_json(cfg)}, {"slices", refs.size()},
                              {"trainable", params.size()}, {"pretrained", pretrained != nullptr}});

    TrainResult res;
    int64_t iter = 0;
    for (int64_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        std::shuffle(refs.begin(), refs.end(), order_rng);
        model->train();
        int64_t n = 0;
        double loss_sum = 0.0;
        for (size_t b0 = 0; b0 < refs.size(); b0 += static_cast<size_t>(cfg.batch_size)) {
            if (cfg.max_iterations > 0 && iter >= cfg.max_iterations) break;
            ++iter;
            const double lr = lr_at(cfg, iter);
            set_lr(opt, lr);
            std::vector<SliceRef> chunk(refs.begin() + static_cast<std::ptrdiff_t>(b0),
                                        refs.begin() + static_cast<std::ptrdiff_t>(std::min(refs.size(), b0 + cfg.batch_size)));
            auto batch = make_batch(chunk, train, nullptr, cfg, aug_rng);
            auto loss = loss_2d(model->forward(batch.x), target_tensor(batch.masks));
            check_finite(loss, iter);
            opt.zero_grad();
            loss.total.backward();
            opt.step();
            const double lv = loss.total.item<double>();
            loss_sum += lv;
            ++n;
            tlog.write({{"iter", iter}, {"lr", lr}, {"loss", lv}, {"ce", loss.ce.item<double>()},
                        {"dice", loss.overlap.item<double>()}, {"mode", "auto"}, {"epoch", epoch}, {"stage", "A2D"}});
        }
        if (n == 0) break;
        res.epoch_iterations.push_back(n);
        res.epoch_loss.push_back(loss_sum / static_cast<double>(n));
        const double score = val.empty() ? -res.epoch_loss.back() : val_dsc_2d(model, val, nullptr, cfg.batch_size);
        log::info("train.epoch", {{"stage", "A2D"}, {"epoch", epoch}, {"loss", res.epoch_loss.back()}, {"val_dsc", score}});
        if (hooks.on_epoch) hooks.on_epoch(epoch, score);
        if (score > res.best_val || res.best_epoch == 0) {
            res.best_val = score;
            res.best_epoch = epoch;
            res.iterations = iter;
            res.bundle = to_bundle(model, "A2D", cfg.seed);
        }
    }
    res.iterations = iter;
    res.bundle.provenance = provenance(cfg, res);
    res.bundle.provenance["pretrained"] = pretrained != nullptr;
    return res;
}

TrainResult train_V3D(const TrainConfig& cfg, const std::vector<Sample>& train, const std::vector<Sample>& val,
                      const TrainHooks& hooks) {
    if (train.empty()) throw invalid_argument("stage V3D: empty training set");
    const auto per_epoch = iterations_per_epoch(static_cast<int64_t>(train.size()), cfg.batch_size_3d);
    cfg.validate(planned_iterations(cfg, per_epoch));

    auto lowres = [](const std::vector<Sample>& ss) {
        std::vector<std::pair<torch::Tensor, torch::Tensor>> out;
        for (const auto& s : ss) {
            auto [v, m] = prepare_lowres(s.volume, &s.mask, kLowRes);
            out.emplace_back(to_tensor(v.data).unsqueeze(0), to_tensor(Grid3<float>(m->shape(), std::vector<float>(m->data.data().begin(), m->data.data().end()))).unsqueeze(0));
        }
        return out;
    };
    auto tr = lowres(train);
    auto va = lowres(val);

    torch::manual_seed(cfg.seed);
    VNet net(cfg.vnet_base);
    torch::optim::AdamW opt(net->parameters(), torch::optim::AdamWOptions(cfg.lr).weight_decay(cfg.weight_decay));
    auto order_rng = stream(cfg.seed, kOrderStream);
    JsonLog tlog(hooks.log_path);
    log::info("train.start", {{"stage", "V3D"}, {"config", to_json(cfg)}, {"volumes", tr.size()}});

    std::vector<size_t> order(tr.size());
    std::iota(order.begin(), order.end(), size_t{0});
    TrainResult res;
    int64_t iter = 0;
    for (int64_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), order_rng);
        net->train();
        int64_t n = 0;
        double loss_sum = 0.0;
        for (size_t b0 = 0; b0 < order.size(); b0 += static_cast<size_t>(cfg.batch_size_3d)) {
            if (cfg.max_iterations > 0 && iter >= cfg.max_iterations) break;
            ++iter;
            const double lr = lr_at(cfg, iter);
            set_lr(opt, lr);
            std::vector<torch::Tensor> xs, ys;
            for (size_t i = b0; i < std::min(order.size(), b0 + cfg.batch_size_3d); ++i) {
                xs.push_back(tr[order[i]].first);
                ys.push_back(tr[order[i]].second);
            }
            auto p = torch::sigmoid(net->forward(torch::stack(xs)));
            auto loss = loss_3d(p, torch::stack(ys));
            check_finite(loss, iter);
            opt.zero_grad();
            loss.total.backward();
            opt.step();
            const double lv = loss.total.item<double>();
            loss_sum += lv;
            ++n;
            tlog.write({{"iter", iter}, {"lr", lr}, {"loss", lv}, {"ce", loss.ce.item<double>()},
                        {"dice", loss.overlap.item<double>()}, {"mode", "3d"}, {"epoch", epoch}, {"stage", "V3D"}});
        }
        if (n == 0) break;
        res.epoch_iterations.push_back(n);
        res.epoch_loss.push_back(loss_sum / static_cast<double>(n));

        double score = -res.epoch_loss.back();
        double rec = 0.0;
        if (!va.empty()) {
            net->eval();
            torch::NoGradGuard no_grad;
            std::vector<double> ds, rs;
            for (const auto& [x, y] : va) {
                auto pred = (torch::sigmoid(net->forward(x.unsqueeze(0))) >= 0.5).to(torch::kUInt8).contiguous();
                auto gt = y.to(torch::kUInt8).contiguous();
                std::span<const uint8_t> ps(pred.data_ptr<uint8_t>(), static_cast<size_t>(pred.numel()));
                std::span<const uint8_t> gs(gt.data_ptr<uint8_t>(), static_cast<size_t>(gt.numel()));
                auto o = count_overlap(ps, gs);
                ds.push_back(dsc(o));
                rs.push_back(recall(o));
            }
            score = mean(ds);
            rec = mean(rs);
        }
        log::info("train.epoch", {{"stage", "V3D"}, {"epoch", epoch}, {"loss", res.epoch_loss.back()},
                                  {"val_dsc", score}, {"val_recall", rec}});
        if (hooks.on_epoch) hooks.on_epoch(epoch, score);
        if (score > res.best_val || res.best_epoch == 0) {
            res.best_val = score;
            res.best_epoch = epoch;
            res.bundle = to_bundle(net, cfg.seed);
        }
    }
    res.iterations = iter;
    res.bundle.provenance = provenance(cfg, res);
    return res;
}

std::vector<std::filesystem::path> precompute_attention(VNet& net, const std::vector<Sample>& samples,
                                                        const AttentionConfig& cfg,
                                                        const std::filesystem::path& out_dir, const json& extra) {
    cfg.validate();
    std::filesystem::create_directories(out_dir);
    std::vector<std::filesystem::path> out;
    for (const auto& s : samples) {
        const auto stem = attention_stem(s.entry.volume);
        auto pv = predict_probability_volume(net, s.volume);
        auto stack = compute_attention_stack(pv, s.volume.shape().depth, cfg);
        json meta = extra.is_object() ? extra : json::object();
        meta["volume"] = s.entry.volume.filename().string();
        save_attention_file(out_dir, stem, stack, cfg, meta);
        out.push_back(attention_header_path(out_dir, stem));
    }
    log::info("attention.precompute", {{"dir", out_dir.string()}, {"files", out.size()}});
    return out;
}

TrainResult train_stage_FUSION(const TrainConfig& cfg, const std::vector<Sample>& train,
                               const std::vector<Sample>& val, const ModelBundle& stage_a,
                               const std::filesystem::path& attention_dir, const TrainHooks& hooks) {
    if (train.empty()) throw invalid_argument("stage FUSION: empty training set");
    auto refs = all_slices(train);
    const auto per_epoch = iterations_per_epoch(static_cast<int64_t>(refs.size()), cfg.batch_size);
    cfg.validate(planned_iterations(cfg, per_epoch));
    const auto train_attn = load_stacks(train, attention_dir);
    const auto val_attn = load_stacks(val, attention_dir);

    torch::manual_seed(cfg.seed);
    Sam2d model = sam2d_from_bundle(stage_a);
    std::map<std::string, std::string> frozen_before;
    {
        auto all = parameter_hashes(*model);
        for (auto& [k, v] : all)
            if (is_encoder_parameter(k)) frozen_before.emplace(k, v);
    }
    std::vector<torch::Tensor> params;
    set_trainable(*model, trainable_names(model, Stage::FUSION, false), params);
    torch::optim::AdamW opt(params, torch::optim::AdamWOptions(cfg.lr).weight_decay(cfg.weight_decay));

    auto order_rng = stream(cfg.seed, kOrderStream);
    auto aug_rng = stream(cfg.seed, kAugmentStream);
    auto mode_rng = stream(cfg.seed, kModeStream);
    auto prompt_rng = stream(cfg.seed, kPromptStream);
    JsonLog tlog(hooks.log_path);
    log::info("train.start", {{"stage", "FUSION"}, {"config", to_json(cfg)}, {"slices", refs.size()},
                              {"trainable", params.size()}});

    TrainResult res;
    int64_t iter = 0;
    for (int64_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        std::shuffle(refs.begin(), refs.end(), order_rng);
        model->train();
        int64_t n = 0, prompted = 0;
        double loss_sum = 0.0;
        for (size_t b0 = 0; b0 < refs.size(); b0 += static_cast<size_t>(cfg.batch_size)) {
            if (cfg.max_iterations > 0 && iter >= cfg.max_iterations) break;
            ++iter;
            const double lr = lr_at(cfg, iter);
            set_lr(opt, lr);
            const auto mode = hybrid_mode(mode_rng, cfg.prompts.prompt_probability);
            std::vector<SliceRef> chunk(refs.begin() + static_cast<std::ptrdiff_t>(b0),
                                        refs.begin() + static_cast<std::ptrdiff_t>(std::min(refs.size(), b0 + cfg.batch_size)));
            auto batch = make_batch(chunk, train, &train_attn, cfg, aug_rng);

            std::vector<PromptSet> sets;
            sets.reserve(chunk.size());
            std::vector<const PromptSet*> prompt_ptrs(chunk.size(), nullptr);
            std::vector<MaskPlane> targets = batch.masks;
            if (mode == PromptMode::Prompted) {
                ++prompted;
                for (size_t i = 0; i < chunk.size(); ++i) {
                    const auto& m = batch.masks[i].data();
                    if (std::none_of(m.begin(), m.end(), [](uint8_t v) { return v != 0; })) continue;
                    sets.push_back(sample_prompts(batch.masks[i], prompt_rng, cfg.prompts));
                    prompt_ptrs[i] = &sets.back();
                    targets[i] = sets.back().selected;
                }
            }

            torch::Tensor z;
            {
                torch::NoGradGuard no_grad;
                z = model->encode_image(batch.x);
            }
            auto zf = model->maybe_fuse(z, batch.attention, std::nullopt);
            std::vector<PromptEmbedding> pe;
            for (auto* p : prompt_ptrs) pe.push_back(model->encode_prompts(p));
            auto loss = loss_2d(model->decode_masks(zf, pe), target_tensor(targets));
            check_finite(loss, iter);
            opt.zero_grad();
            loss.total.backward();
            opt.step();
            const double lv = loss.total.item<double>();
            loss_sum += lv;
            ++n;
            tlog.write({{"iter", iter}, {"lr", lr}, {"loss", lv}, {"ce", loss.ce.item<double>()},
                        {"dice", loss.overlap.item<double>()},
                        {"mode", mode == PromptMode::Prompted ? "prompt" : "auto"}, {"epoch", epoch},
                        {"stage", "FUSION"}, {"g", model->fusion->g.item<double>()}});
        }
        if (n == 0) break;
        res.epoch_iterations.push_back(n);
        res.epoch_prompted.push_back(prompted);
        res.epoch_loss.push_back(loss_sum / static_cast<double>(n));
        const double score =
            val.empty() ? -res.epoch_loss.back() : val_dsc_2d(model, val, &val_attn, cfg.batch_size);
        const double g = model->fusion->g.item<double>();
        log::info("train.epoch", {{"stage", "FUSION"}, {"epoch", epoch}, {"loss", res.epoch_loss.back()},
                                  {"val_dsc", score}, {"g", g},
                                  {"prompted_fraction", static_cast<double>(prompted) / static_cast<double>(n)}});
        if (hooks.on_epoch) hooks.on_epoch(epoch, score);
        if (score > res.best_val || res.best_epoch == 0) {
            res.best_val = score;
            res.best_epoch = epoch;
            res.final_gate = g;
            res.bundle = to_bundle(model, "FUSION", cfg.seed);
        }
    }

    auto after = parameter_hashes(*model);
    for (const auto& [k, v] : frozen_before)
        if (after.at(k) != v) throw Error(Error::Kind::Contract, "stage FUSION modified frozen encoder parameter " + k);

    res.iterations = iter;
    res.bundle.provenance = provenance(cfg, res);
    res.bundle.provenance["gate_g"] = res.final_gate;
    res.bundle.provenance["prompted_per_epoch"] = res.epoch_prompted;
    res.bundle.provenance["iterations_per_epoch"] = res.epoch_iterations;
    return res;
}

}  // namespace sabone
