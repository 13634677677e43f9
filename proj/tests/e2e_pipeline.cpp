#include "e2e_pipeline.hpp"

#include <chrono>
#include <cstdlib>
#include <fstream>

#include "sabone/bundle.hpp"
#include "sabone/dataset.hpp"
#include "sabone/log.hpp"
#include "sabone/phantom.hpp"
#include "sabone/training.hpp"

namespace sabone::e2e {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kPhantoms = 46;
constexpr uint64_t kDataSeed = 2024;
constexpr uint64_t kSplitSeed = 1;
constexpr uint64_t kTrainSeed = 1;

TrainConfig stage_config(Stage s) {
    TrainConfig c;
    c.stage = s;
    c.seed = kTrainSeed;
    c.augment.seed = kTrainSeed;
    return c;
}

json read_stamp(const Paths& p) {
    std::ifstream in(p.stamp());
    if (!in) return json::object();
    try {
        return json::parse(in);
    } catch (const json::exception&) {
        return json::object();
    }
}

void write_stamp(const Paths& p, const json& j) {
    std::ofstream out(p.stamp());
    out << j.dump(2) << "\n";
}

template <class F>
void stage(const Paths& p, json& stamp, const std::string& name, F&& body) {
    const json want = pipeline_config();
    if (stamp.value("config", json()) != want) stamp = json{{"config", want}, {"done", json::object()}};
    if (stamp["done"].value(name, false)) return;
    const auto t0 = std::chrono::steady_clock::now();
    body();
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    stamp["done"][name] = true;
    stamp["seconds"][name] = s;
    write_stamp(p, stamp);
    log::info("e2e.stage", {{"stage", name}, {"seconds", s}});
}

}  // namespace

json pipeline_config() {
    return json{{"phantoms", kPhantoms},
                {"data_seed", kDataSeed},
                {"split", {30, 8, 8}},
                {"split_seed", kSplitSeed},
                {"phantom", to_json(PhantomConfig{})},
                {"train_a", to_json(stage_config(Stage::A2D))},
                {"train_v", to_json(stage_config(Stage::V3D))},
                {"train_f", to_json(stage_config(Stage::FUSION))},
                {"sequence", kTrainSequence},
                {"version", 1}};
}

fs::path default_root(const fs::path& fallback) {
    if (const char* d = std::getenv("SABONE_E2E_DIR"); d && *d) return d;
    return fallback;
}

Paths ensure_pipeline(const fs::path& root) {
    Paths p{root};
    fs::create_directories(root);
    json stamp = read_stamp(p);

    stage(p, stamp, "data", [&] {
        const auto m = generate_phantom_set(kPhantoms, kDataSeed, PhantomConfig{}, root / "data");
        auto split = split_dataset(load_manifest(m), {30.0 / 46, 8.0 / 46, 8.0 / 46}, kSplitSeed);
        fs::create_directories(root / "split");
        save_manifest(split, p.manifest());
    });

    const auto manifest = load_manifest(p.manifest());
    auto samples = [&](Split s) { return load_samples(manifest.select(s, kTrainSequence)); };

    stage(p, stamp, "A2D", [&] {
        auto r = train_stage_A2D(stage_config(Stage::A2D), samples(Split::Train), samples(Split::Val), nullptr,
                                 {root / "train_2d.jsonl", {}});
        save_bundle(r.bundle, p.model_2d());
    });
    stage(p, stamp, "V3D", [&] {
        auto r = train_V3D(stage_config(Stage::V3D), samples(Split::Train), samples(Split::Val),
                           {root / "train_3d.jsonl", {}});
        save_bundle(r.bundle, p.model_3d());
    });
    stage(p, stamp, "attention", [&] {
        auto net = vnet_from_bundle(load_bundle(p.model_3d()));
        fs::remove_all(p.attention());
        precompute_attention(net, load_samples(manifest.entries), AttentionConfig{}, p.attention(),
                             json{{"bundle_sha256", file_sha256(p.model_3d())}});
    });
    stage(p, stamp, "FUSION", [&] {
        auto r = train_stage_FUSION(stage_config(Stage::FUSION), samples(Split::Train), samples(Split::Val),
                                    load_bundle(p.model_2d()), p.attention(), {root / "train_fusion.jsonl", {}});
        save_bundle(r.bundle, p.model_fusion());
    });
    return p;
}

}  // namespace sabone::e2e
