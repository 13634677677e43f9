#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sabone/attention.hpp"
#include "sabone/augment.hpp"
#include "sabone/bundle.hpp"
#include "sabone/dataset.hpp"
#include "sabone/depth3d.hpp"
#include "sabone/prompting.hpp"
#include "sabone/sam2d.hpp"

namespace sabone {

enum class Stage { A2D, V3D, FUSION };
std::string to_string(Stage s);
Stage stage_from_string(const std::string& s);

struct TrainConfig {
    Stage stage = Stage::A2D;
    int64_t batch_size = 8;
    int64_t batch_size_3d = 2;
    int64_t epochs = 20;
    double lr = 5e-4;
    double weight_decay = 0.01;
    int64_t warmup = 200;
    uint64_t seed = 0;
    AugmentPipeline augment = AugmentPipeline::defaults();
    PromptConfig prompts;
    AttentionConfig attention;
    Sam2dConfig model;
    int64_t vnet_base = 8;
    /// Stops after this many iterations when > 0 (smoke runs).
    int64_t max_iterations = 0;

    int64_t image_size() const { return model.encoder.image_size; }
    /// lr > 0, batch sizes and epochs >= 1, warmup <= total_iterations.
    void validate(int64_t total_iterations) const;
};

nlohmann::json to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {});

/// Linear warmup: lr * t / warmup for t < warmup, lr afterwards. Iterations
/// are counted from 1, so the first step already moves the parameters.
double lr_at(const TrainConfig& c, int64_t iteration);

struct TrainHooks {
    std::filesystem::path log_path;  ///< JSON-lines training log; empty = none
    /// Called after each epoch with (epoch, val score).
    std::function<void(int64_t, double)> on_epoch;
};

struct TrainResult {
    ModelBundle bundle;  ///< best-by-validation checkpoint
    double best_val = -1.0;
    int64_t best_epoch = 0;
    int64_t iterations = 0;
    std::vector<int64_t> epoch_iterations;
    std::vector<int64_t> epoch_prompted;  ///< FUSION: prompted iterations per epoch
    std::vector<double> epoch_loss;       ///< mean training loss per epoch
    double final_gate = 1.0;
};

/// Stage A: automatic-mode training of the 2D branch. With `pretrained`
/// the trainable set is adapters + output heads; without it, everything but
/// the prompt encoder and fusion gate.
TrainResult train_stage_A2D(const TrainConfig& cfg, const std::vector<Sample>& train, const std::vector<Sample>& val,
                            const ModelBundle* pretrained = nullptr, const TrainHooks& hooks = {});

/// 3D branch on 64^3 (volume, mask) pairs with loss_3d; best by val DSC.
TrainResult train_V3D(const TrainConfig& cfg, const std::vector<Sample>& train, const std::vector<Sample>& val,
                      const TrainHooks& hooks = {});

/// Writes one attention file per sample into `out_dir`, named by the
/// volume's stem. Returns the header paths.
std::vector<std::filesystem::path> precompute_attention(VNet& net, const std::vector<Sample>& samples,
                                                        const AttentionConfig& cfg,
                                                        const std::filesystem::path& out_dir,
                                                        const nlohmann::json& extra = {});

/// Stage B: frozen image encoder; trains the fusion gate, prompt encoder
/// and mask decoder with hybrid prompting. Attention stacks are read from
/// `attention_dir`. Throws Error(Contract) if any encoder parameter moved.
TrainResult train_stage_FUSION(const TrainConfig& cfg, const std::vector<Sample>& train,
                               const std::vector<Sample>& val, const ModelBundle& stage_a,
                               const std::filesystem::path& attention_dir, const TrainHooks& hooks = {});

/// Names of parameters updated in each stage.
std::vector<std::string> trainable_names(Sam2d& model, Stage stage, bool pretrained);

}  // namespace sabone
