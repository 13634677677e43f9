#pragma once

#include <filesystem>
#include <memory>
#include <string>

#include <nlohmann/json.hpp>

#include "sabone/attention.hpp"

namespace sabone {

struct ServiceConfig {
    std::string host = "127.0.0.1";
    int port = 8080;
    std::filesystem::path model_path;    ///< 2D bundle; empty = none
    std::filesystem::path model3d_path;  ///< V-net bundle; empty = none
    AttentionConfig attention;
    std::string cors_origin = "*";
};

/// Applies BIND_ADDR ("host:port" or "host"), MODEL_PATH and MODEL3D_PATH
/// from the environment on top of `base`.
ServiceConfig service_config_from_env(ServiceConfig base = {});

/// HTTP inference service. Endpoints:
///   POST /v1/volumes                    archive upload -> {volume_id, depth, height, width}
///   GET  /v1/volumes/{id}/slices/{k}    8-bit PNG of slice k
///   POST /v1/segment                    {volume_id, slice_index, mode, prompts?, use_depth_attention}
///   GET  /v1/model                      {hash, cfg, stage, provenance, has_3d}
class Service {
public:
    explicit Service(ServiceConfig cfg);
    ~Service();
    Service(const Service&) = delete;
    Service& operator=(const Service&) = delete;

    /// Loads (or hot-swaps) the bundles; in-flight requests finish first.
    void load_model(const std::filesystem::path& path);
    void load_model3d(const std::filesystem::path& path);

    /// Binds cfg.host:cfg.port (port 0 picks a free port) and returns the
    /// bound port; throws Error(Io) when binding fails.
    int bind();
    /// Serves until stop(). Call after bind().
    void serve();
    void stop();

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

}  // namespace sabone
