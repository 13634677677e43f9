#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sabone/inference.hpp"
#include "sabone/metrics.hpp"

namespace sabone {

struct EvalConfig {
    EvalMode mode = EvalMode::Auto;
    bool use_attention = true;  ///< fuse depth attention when a source is available
    int64_t batch_size = 8;
    int resamples = 1000;
    uint64_t seed = 0;
};

nlohmann::json to_json(const EvalConfig& c);
EvalConfig eval_config_from_json(const nlohmann::json& j, EvalConfig base = {});

struct VolumeResult {
    std::string id;
    std::string location_tag;
    std::string sequence_tag;
    double dsc = 0.0;
    double iou = 0.0;
};

struct LocationSummary {
    std::string location_tag;
    int64_t count = 0;
    double mean_dsc = 0.0;
    double mean_iou = 0.0;
    Interval ci95_dsc;
    Interval ci95_iou;
};

struct EvalReport {
    std::vector<VolumeResult> volumes;
    std::vector<LocationSummary> locations;  ///< sorted by tag
    double mean_dsc = 0.0;                   ///< over all volumes
    double mean_iou = 0.0;
    nlohmann::json config = nlohmann::json::object();
};

nlohmann::json to_json(const EvalReport& r);
EvalReport eval_report_from_json(const nlohmann::json& j);
void save_report(const EvalReport& r, const std::filesystem::path& path);
/// One row per volume: id,location_tag,sequence_tag,dsc,iou.
void save_report_csv(const EvalReport& r, const std::filesystem::path& path);

/// Volumewise overlap of a predicted mask against the ground truth.
VolumeResult score_volume(const MaskVolume& pred, const MaskVolume& gt);

/// Segments and scores one volume.
VolumeResult evaluate_volume(Sam2d& model, const Volume& v, const MaskVolume& gt, const Grid3<float>* attention,
                             const EvalConfig& cfg);

/// Aggregates per-volume rows into per-location means with bootstrap CIs.
EvalReport summarize(std::vector<VolumeResult> rows, const EvalConfig& cfg);

/// Evaluates every sample; attention is taken from `source` when
/// cfg.use_attention and the source is enabled.
EvalReport evaluate_dataset(Sam2d& model, const std::vector<Sample>& samples, const AttentionSource& source,
                            const EvalConfig& cfg);

}  // namespace sabone
