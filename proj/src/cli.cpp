#include "sabone/cli.hpp"

#include <atomic>
#include <csignal>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "sabone/dataset.hpp"
#include "sabone/error.hpp"
#include "sabone/evaluation.hpp"
#include "sabone/log.hpp"
#include "sabone/phantom.hpp"
#include "sabone/service.hpp"
#include "sabone/training.hpp"

namespace sabone::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json read_json_file(const fs::path& p) {
    std::ifstream in(p);
    if (!in) throw io_error("cannot open " + p.string());
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw format_error(p.string() + ": " + e.what());
    }
}

void write_json_file(const json& j, const fs::path& p) {
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    std::ofstream out(p);
    if (!out) throw io_error("cannot write " + p.string());
    out << j.dump(2) << "\n";
}

Split parse_split(const std::string& s) { return split_from_string(s); }

std::vector<Sample> load_split(const fs::path& manifest, const std::string& split, const std::string& sequence) {
    const auto m = load_manifest(manifest);
    return load_samples(m.select(parse_split(split), sequence));
}

// Options shared by the three training subcommands. Values only override
// the config file when the flag was actually given.
struct TrainFlags {
    std::string data, out, config, sequence, pretrained, ckpt, attn;
    int64_t epochs = 0, batch = 0, warmup = 0, image_size = 0, max_iter = 0;
    double lr = 0;
    uint64_t seed = 0;
    CLI::Option *o_epochs{}, *o_batch{}, *o_warmup{}, *o_image{}, *o_lr{}, *o_seed{}, *o_max{};
};

void add_train_flags(CLI::App* sub, TrainFlags& f) {
    sub->add_option("--data", f.data, "dataset manifest")->required();
    sub->add_option("--out", f.out, "output directory")->required();
    sub->add_option("--config", f.config, "training config JSON");
    sub->add_option("--sequence", f.sequence, "train only on this sequence tag (default: all)");
    f.o_epochs = sub->add_option("--epochs", f.epochs)->check(CLI::PositiveNumber);
    f.o_batch = sub->add_option("--batch-size", f.batch)->check(CLI::PositiveNumber);
    f.o_warmup = sub->add_option("--warmup", f.warmup)->check(CLI::NonNegativeNumber);
    f.o_image = sub->add_option("--image-size", f.image_size)->check(CLI::PositiveNumber);
    f.o_lr = sub->add_option("--lr", f.lr)->check(CLI::PositiveNumber);
    f.o_seed = sub->add_option("--seed", f.seed);
    f.o_max = sub->add_option("--max-iterations", f.max_iter)->check(CLI::NonNegativeNumber);
}

TrainConfig resolve_train_config(const TrainFlags& f, Stage stage) {
    TrainConfig c;
    if (!f.config.empty()) c = train_config_from_json(read_json_file(f.config), c);
    c.stage = stage;
    if (f.o_epochs->count()) c.epochs = f.epochs;
    if (f.o_batch->count()) (stage == Stage::V3D ? c.batch_size_3d : c.batch_size) = f.batch;
    if (f.o_warmup->count()) c.warmup = f.warmup;
    if (f.o_image->count()) c.model.encoder.image_size = f.image_size;
    if (f.o_lr->count()) c.lr = f.lr;
    if (f.o_seed->count()) c.seed = f.seed;
    if (f.o_max->count()) c.max_iterations = f.max_iter;
    c.augment.seed = c.seed;
    log::info("cli.config", {{"stage", to_string(stage)}, {"seed", c.seed}, {"config", to_json(c)}});
    return c;
}

void finish_training(const TrainResult& r, const TrainConfig& cfg, const fs::path& out, const std::string& name) {
    save_bundle(r.bundle, out / (name + ".bundle"));
    write_json_file(to_json(cfg), out / (name + ".config.json"));
    log::info("cli.trained", {{"bundle", (out / (name + ".bundle")).string()},
                              {"best_val", r.best_val},
                              {"best_epoch", r.best_epoch},
                              {"iterations", r.iterations}});
}

std::atomic<Service*> g_service{nullptr};

extern "C" void handle_signal(int) {
    if (auto* s = g_service.load()) s->stop();
}

PromptSet read_prompts(const std::string& arg) {
    if (fs::exists(arg)) return prompts_from_json(read_json_file(arg));
    try {
        return prompts_from_json(json::parse(arg));
    } catch (const json::exception& e) {
        throw invalid_argument(std::string("--prompts is neither a file nor valid JSON: ") + e.what());
    }
}

}  // namespace

int run(const std::vector<std::string>& args) {
    CLI::App app{"Promptable bone segmentation with depth attention", "sabone"};
    app.require_subcommand(1);
    std::string log_level = "info";
    app.add_option("--log-level", log_level, "debug, info, warn or error")
        ->check(CLI::IsMember({"debug", "info", "warn", "error"}));

    // phantom gen
    auto* phantom = app.add_subcommand("phantom", "synthetic phantom data");
    phantom->require_subcommand(1);
    auto* gen = phantom->add_subcommand("gen", "generate a phantom set with twins and a manifest");
    int count = 0;
    uint64_t gen_seed = 0;
    std::string gen_out, gen_config;
    gen->add_option("--count", count)->required()->check(CLI::PositiveNumber);
    gen->add_option("--seed", gen_seed);
    gen->add_option("--out", gen_out)->required();
    gen->add_option("--config", gen_config, "phantom config JSON");

    // split
    auto* split = app.add_subcommand("split", "assign patients to train/val/test");
    std::string split_data, split_out, ratios_arg = "0.7,0.15,0.15";
    uint64_t split_seed = 0;
    split->add_option("--data", split_data)->required();
    split->add_option("--out", split_out)->required();
    split->add_option("--ratios", ratios_arg, "train,val,test weights (normalised)");
    split->add_option("--seed", split_seed);

    TrainFlags t2, t3, tf;
    auto* train2d = app.add_subcommand("train-2d", "stage A: automatic 2D training");
    add_train_flags(train2d, t2);
    train2d->add_option("--pretrained", t2.pretrained, "pretrained 2D bundle (adapter-only training)");
    auto* train3d = app.add_subcommand("train-3d", "train the 3D attention V-net");
    add_train_flags(train3d, t3);
    auto* trainfusion = app.add_subcommand("train-fusion", "stage B: fusion gate + decoder with hybrid prompting");
    add_train_flags(trainfusion, tf);
    trainfusion->add_option("--ckpt", tf.ckpt, "stage A bundle")->required();
    trainfusion->add_option("--attn", tf.attn, "precomputed attention directory")->required();

    // attn-precompute
    auto* attn = app.add_subcommand("attn-precompute", "write depth-attention files for a dataset");
    std::string attn_ckpt, attn_data, attn_out, attn_split = "all", attn_seq, attn_config;
    attn->add_option("--ckpt3d", attn_ckpt)->required();
    attn->add_option("--data", attn_data)->required();
    attn->add_option("--out", attn_out)->required();
    attn->add_option("--split", attn_split, "train, val, test or all");
    attn->add_option("--sequence", attn_seq);
    attn->add_option("--config", attn_config, "attention config JSON");

    // eval
    auto* eval = app.add_subcommand("eval", "evaluate a 2D bundle on a split");
    std::string ev_ckpt, ev_ckpt3d, ev_attn, ev_data, ev_split = "test", ev_report, ev_csv, ev_mode = "auto", ev_seq,
                                                    ev_out;
    uint64_t ev_seed = 0;
    int ev_resamples = 1000;
    eval->add_option("--ckpt", ev_ckpt)->required();
    eval->add_option("--ckpt3d", ev_ckpt3d, "V-net bundle for on-the-fly depth attention");
    eval->add_option("--attn", ev_attn, "precomputed attention directory");
    eval->add_option("--data", ev_data)->required();
    eval->add_option("--split", ev_split);
    eval->add_option("--report", ev_report);
    eval->add_option("--out", ev_out, "directory for report.json when --report is not given");
    eval->add_option("--csv", ev_csv);
    eval->add_option("--mode", ev_mode)->check(CLI::IsMember({"auto", "prompted-oracle", "2d-only"}));
    eval->add_option("--sequence", ev_seq);
    eval->add_option("--seed", ev_seed);
    eval->add_option("--resamples", ev_resamples)->check(CLI::PositiveNumber);

    // segment
    auto* seg = app.add_subcommand("segment", "segment one volume");
    std::string sg_ckpt, sg_ckpt3d, sg_volume, sg_out, sg_mode = "auto", sg_prompts;
    int64_t sg_slice = -1;
    seg->add_option("--ckpt", sg_ckpt)->required();
    seg->add_option("--ckpt3d", sg_ckpt3d);
    seg->add_option("--volume", sg_volume)->required();
    seg->add_option("--out", sg_out, "output mask archive")->required();
    seg->add_option("--mode", sg_mode)->check(CLI::IsMember({"auto", "prompt"}));
    seg->add_option("--prompts", sg_prompts, "prompt JSON (inline or file), native pixel coordinates");
    seg->add_option("--slice", sg_slice, "segment only this slice (required in prompt mode)");

    // serve
    auto* serve = app.add_subcommand("serve", "run the HTTP inference service");
    std::string sv_host, sv_ckpt, sv_ckpt3d;
    int sv_port = -1;
    auto* o_host = serve->add_option("--host", sv_host);
    auto* o_port = serve->add_option("--port", sv_port)->check(CLI::Range(0, 65535));
    serve->add_option("--ckpt", sv_ckpt);
    serve->add_option("--ckpt3d", sv_ckpt3d);

    std::vector<std::string> rev(args.rbegin(), args.rend() - 1);
    try {
        app.parse(rev);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    if (log_level == "debug") log::set_min_level(log::Level::Debug);
    else if (log_level == "warn") log::set_min_level(log::Level::Warn);
    else if (log_level == "error") log::set_min_level(log::Level::Error);

    try {
        if (gen->parsed()) {
            PhantomConfig pc;
            if (!gen_config.empty()) pc = phantom_config_from_json(read_json_file(gen_config), pc);
            log::info("cli.config", {{"command", "phantom gen"}, {"seed", gen_seed}, {"count", count}, {"config", to_json(pc)}});
            auto m = generate_phantom_set(count, gen_seed, pc, gen_out);
            log::info("cli.done", {{"manifest", m.string()}});
        } else if (split->parsed()) {
            std::array<double, 3> r{};
            std::stringstream ss(ratios_arg);
            std::string tok;
            int i = 0;
            double sum = 0;
            while (std::getline(ss, tok, ',')) {
                if (i >= 3) throw invalid_argument("--ratios needs exactly three values");
                try {
                    r[static_cast<size_t>(i)] = std::stod(tok);
                } catch (const std::exception&) {
                    throw invalid_argument("--ratios value '" + tok + "' is not a number");
                }
                sum += r[static_cast<size_t>(i++)];
            }
            if (i != 3 || !(sum > 0)) throw invalid_argument("--ratios needs three non-negative values with a positive sum");
            for (auto& x : r) x /= sum;
            log::info("cli.config", {{"command", "split"}, {"seed", split_seed}, {"ratios", r}});
            auto m = split_dataset(load_manifest(split_data), r, split_seed);
            fs::create_directories(split_out);
            save_manifest(m, fs::path(split_out) / "manifest.json");
        } else if (train2d->parsed()) {
            auto cfg = resolve_train_config(t2, Stage::A2D);
            auto train = load_split(t2.data, "train", t2.sequence);
            auto val = load_split(t2.data, "val", t2.sequence);
            std::optional<ModelBundle> pre;
            if (!t2.pretrained.empty()) pre = load_bundle(t2.pretrained);
            fs::create_directories(t2.out);
            auto r = train_stage_A2D(cfg, train, val, pre ? &*pre : nullptr, {fs::path(t2.out) / "train_2d.jsonl", {}});
            finish_training(r, cfg, t2.out, "model_2d");
        } else if (train3d->parsed()) {
            auto cfg = resolve_train_config(t3, Stage::V3D);
            auto train = load_split(t3.data, "train", t3.sequence);
            auto val = load_split(t3.data, "val", t3.sequence);
            fs::create_directories(t3.out);
            auto r = train_V3D(cfg, train, val, {fs::path(t3.out) / "train_3d.jsonl", {}});
            finish_training(r, cfg, t3.out, "model_3d");
        } else if (trainfusion->parsed()) {
            auto cfg = resolve_train_config(tf, Stage::FUSION);
            auto train = load_split(tf.data, "train", tf.sequence);
            auto val = load_split(tf.data, "val", tf.sequence);
            fs::create_directories(tf.out);
            auto r = train_stage_FUSION(cfg, train, val, load_bundle(tf.ckpt), tf.attn,
                                        {fs::path(tf.out) / "train_fusion.jsonl", {}});
            finish_training(r, cfg, tf.out, "model_fusion");
        } else if (attn->parsed()) {
            AttentionConfig ac;
            if (!attn_config.empty()) ac = attention_config_from_json(read_json_file(attn_config), ac);
            log::info("cli.config", {{"command", "attn-precompute"}, {"config", to_json(ac)}});
            const auto m = load_manifest(attn_data);
            std::vector<ManifestEntry> entries;
            if (attn_split == "all") {
                for (const auto& e : m.entries)
                    if (attn_seq.empty() || e.sequence_tag == attn_seq) entries.push_back(e);
            } else {
                entries = m.select(parse_split(attn_split), attn_seq);
            }
            auto net = vnet_from_bundle(load_bundle(attn_ckpt));
            precompute_attention(net, load_samples(entries), ac, attn_out, json{{"bundle_sha256", file_sha256(attn_ckpt)}});
        } else if (eval->parsed()) {
            if (!ev_attn.empty() && !ev_ckpt3d.empty()) throw invalid_argument("give --attn or --ckpt3d, not both");
            if (ev_report.empty() && ev_out.empty()) throw invalid_argument("eval needs --report or --out");
            EvalConfig ec;
            ec.mode = eval_mode_from_string(ev_mode);
            ec.seed = ev_seed;
            ec.resamples = ev_resamples;
            log::info("cli.config", {{"command", "eval"}, {"seed", ev_seed}, {"config", to_json(ec)}});
            auto model = sam2d_from_bundle(load_bundle(ev_ckpt));
            AttentionSource src;
            src.dir = ev_attn;
            if (!ev_ckpt3d.empty()) src.vnet = vnet_from_bundle(load_bundle(ev_ckpt3d));
            auto report = evaluate_dataset(model, load_split(ev_data, ev_split, ev_seq), src, ec);
            report.config["checkpoint"] = ev_ckpt;
            report.config["split"] = ev_split;
            const fs::path rp = ev_report.empty() ? fs::path(ev_out) / "report.json" : fs::path(ev_report);
            if (rp.has_parent_path()) fs::create_directories(rp.parent_path());
            save_report(report, rp);
            if (!ev_csv.empty()) save_report_csv(report, ev_csv);
            log::info("cli.done", {{"report", rp.string()}, {"mean_dsc", report.mean_dsc}, {"mean_iou", report.mean_iou}});
        } else if (seg->parsed()) {
            if (sg_mode == "prompt" && (sg_prompts.empty() || sg_slice < 0))
                throw invalid_argument("prompt mode needs --prompts and --slice");
            if (sg_mode == "auto" && !sg_prompts.empty()) throw invalid_argument("--prompts requires --mode prompt");
            log::info("cli.config", {{"command", "segment"}, {"mode", sg_mode}, {"slice", sg_slice}});
            auto model = sam2d_from_bundle(load_bundle(sg_ckpt));
            const auto v = load_volume(sg_volume);
            std::optional<Grid3<float>> stack;
            if (!sg_ckpt3d.empty()) {
                auto net = vnet_from_bundle(load_bundle(sg_ckpt3d));
                stack = compute_attention_stack(predict_probability_volume(net, v), v.shape().depth, AttentionConfig{});
            }
            MaskVolume out{Grid3<uint8_t>(v.shape()), fs::path(sg_volume).filename().string()};
            if (sg_slice >= 0) {
                if (sg_slice >= v.shape().depth) throw range_error("--slice out of range");
                std::optional<PromptSet> ps;
                if (sg_mode == "prompt") {
                    ps = read_prompts(sg_prompts);
                    validate_prompts(*ps, v.shape().height, v.shape().width);
                }
                SliceInput in{extract_slice(v, sg_slice), ps ? &*ps : nullptr, std::nullopt};
                if (stack) in.attention = attention_plane(*stack, sg_slice, v.shape().height, v.shape().width);
                auto m = predict_slices(model, {in}).front();
                std::copy(m.data().begin(), m.data().end(), out.data.plane(sg_slice).begin());
            } else {
                out.data = predict_volume(model, v, stack ? &*stack : nullptr, EvalMode::Auto).data;
            }
            fs::path op(sg_out);
            if (op.has_parent_path()) fs::create_directories(op.parent_path());
            save_mask(out, op, v.spacing);
            log::info("cli.done", {{"mask", op.string()}});
        } else if (serve->parsed()) {
            auto sc = service_config_from_env();
            if (o_host->count()) sc.host = sv_host;
            if (o_port->count()) sc.port = sv_port;
            if (!sv_ckpt.empty()) sc.model_path = sv_ckpt;
            if (!sv_ckpt3d.empty()) sc.model3d_path = sv_ckpt3d;
            log::info("cli.config", {{"command", "serve"}, {"host", sc.host}, {"port", sc.port},
                                     {"model", sc.model_path.string()}, {"model3d", sc.model3d_path.string()}});
            Service service(sc);
            service.bind();
            g_service = &service;
            std::signal(SIGINT, handle_signal);
            std::signal(SIGTERM, handle_signal);
            service.serve();
            g_service = nullptr;
        }
    } catch (const Error& e) {
        log::error("cli.failed", {{"error", e.what()}});
        switch (e.kind()) {
            case Error::Kind::Invalid:
            case Error::Kind::Format:
            case Error::Kind::Shape:
            case Error::Kind::Range:
                return 1;
            default:
                return 2;
        }
    } catch (const std::exception& e) {
        log::error("cli.failed", {{"error", e.what()}});
        return 2;
    }
    return 0;
}

int run(int argc, char** argv) { return run(std::vector<std::string>(argv, argv + argc)); }

}  // namespace sabone::cli
