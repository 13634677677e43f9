#include "sabone/service.hpp"

#include <atomic>
#include <chrono>
#include <cstdlib>
#include <map>
#include <mutex>
#include <optional>
#include <shared_mutex>

#include <httplib.h>

#include "sabone/bundle.hpp"
#include "sabone/depth3d.hpp"
#include "sabone/error.hpp"
#include "sabone/inference.hpp"
#include "sabone/log.hpp"
#include "sabone/png.hpp"
#include "sabone/rle.hpp"
#include "sabone/sam2d.hpp"
#include "sabone/volume.hpp"

namespace sabone {

using nlohmann::json;

ServiceConfig service_config_from_env(ServiceConfig c) {
    if (const char* b = std::getenv("BIND_ADDR"); b && *b) {
        std::string s(b);
        const auto colon = s.rfind(':');
        if (colon == std::string::npos) {
            c.host = s;
        } else {
            c.host = s.substr(0, colon);
            try {
                c.port = std::stoi(s.substr(colon + 1));
            } catch (const std::exception&) {
                throw invalid_argument("BIND_ADDR port is not a number: " + s);
            }
        }
    }
    if (const char* m = std::getenv("MODEL_PATH"); m && *m) c.model_path = m;
    if (const char* m = std::getenv("MODEL3D_PATH"); m && *m) c.model3d_path = m;
    return c;
}

namespace {

struct Model2d {
    Sam2d model{nullptr};
    std::string hash;
    ModelBundle bundle;
};

struct Model3d {
    VNet net{nullptr};
    std::string hash;
    uint64_t generation = 0;
};

struct Session {
    Volume volume;
    std::mutex mu;
    std::optional<ProbabilityVolume> pv;  // cached per 3D-model generation
    uint64_t pv_generation = 0;
};

void reply_json(httplib::Response& res, int status, const json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
}

void reply_error(httplib::Response& res, int status, const std::string& msg) {
    reply_json(res, status, json{{"error", msg}});
}

}  // namespace

struct Service::Impl {
    ServiceConfig cfg;
    httplib::Server server;

    std::shared_mutex model_mu;
    std::shared_ptr<Model2d> model2d;
    std::shared_ptr<Model3d> model3d;
    uint64_t generation3d = 0;

    std::mutex sessions_mu;
    std::map<std::string, std::shared_ptr<Session>> sessions;
    std::atomic<uint64_t> next_id{1};

    std::shared_ptr<Session> find(const std::string& id) {
        std::lock_guard lock(sessions_mu);
        auto it = sessions.find(id);
        return it == sessions.end() ? nullptr : it->second;
    }

    void routes();
    void upload(const httplib::Request& req, httplib::Response& res);
    void slice(const httplib::Request& req, httplib::Response& res);
    void segment(const httplib::Request& req, httplib::Response& res);
    void model_info(httplib::Response& res);
};

void Service::Impl::routes() {
    server.set_default_headers({{"Access-Control-Allow-Origin", cfg.cors_origin},
                                {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"},
                                {"Access-Control-Allow-Headers", "Content-Type"}});
    server.Options(R"(/.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });
    server.Post("/v1/volumes", [this](const httplib::Request& req, httplib::Response& res) { upload(req, res); });
    server.Get(R"(/v1/volumes/([^/]+)/slices/(-?\d+))",
               [this](const httplib::Request& req, httplib::Response& res) { slice(req, res); });
    server.Post("/v1/segment", [this](const httplib::Request& req, httplib::Response& res) { segment(req, res); });
    server.Get("/v1/model", [this](const httplib::Request&, httplib::Response& res) { model_info(res); });
    server.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
        try {
            std::rethrow_exception(ep);
        } catch (const std::exception& e) {
            log::error("service.exception", {{"what", e.what()}});
            reply_error(res, 500, e.what());
        }
    });
}

void Service::Impl::upload(const httplib::Request& req, httplib::Response& res) {
    Volume v;
    try {
        if (req.is_multipart_form_data()) {
            if (!req.has_file("header") || !req.has_file("raw"))
                return reply_error(res, 400, "multipart upload needs 'header' and 'raw' parts");
            v = parse_volume_archive(req.get_file_value("header").content, req.get_file_value("raw").content);
        } else {
            v = unpack_volume_archive(req.body);
        }
    } catch (const Error& e) {
        return reply_error(res, 400, e.what());
    }
    auto s = std::make_shared<Session>();
    s->volume = std::move(v);
    const auto shape = s->volume.shape();
    const std::string id = "vol-" + std::to_string(next_id.fetch_add(1));
    {
        std::lock_guard lock(sessions_mu);
        sessions.emplace(id, s);
    }
    log::info("service.upload", {{"volume_id", id}, {"shape", to_string(shape)}});
    reply_json(res, 200, json{{"volume_id", id}, {"depth", shape.depth}, {"height", shape.height}, {"width", shape.width}});
}

void Service::Impl::slice(const httplib::Request& req, httplib::Response& res) {
    auto s = find(req.matches[1]);
    if (!s) return reply_error(res, 404, "unknown volume id");
    int64_t k = 0;
    try {
        k = std::stoll(req.matches[2]);
    } catch (const std::exception&) {
        return reply_error(res, 416, "slice index out of range");
    }
    const auto shape = s->volume.shape();
    if (k < 0 || k >= shape.depth) return reply_error(res, 416, "slice index out of range");
    auto px = render_gray8(extract_slice(s->volume, k));
    res.status = 200;
    res.set_content(encode_png_gray8(px, shape.height, shape.width), "image/png");
}

void Service::Impl::segment(const httplib::Request& req, httplib::Response& res) {
    const auto t0 = std::chrono::steady_clock::now();
    json body;
    try {
        body = json::parse(req.body);
    } catch (const json::exception&) {
        return reply_error(res, 400, "request body is not valid JSON");
    }
    if (!body.is_object() || !body.contains("volume_id") || !body["volume_id"].is_string())
        return reply_error(res, 400, "volume_id is required");
    auto s = find(body["volume_id"].get<std::string>());
    if (!s) return reply_error(res, 404, "unknown volume id");
    if (!body.contains("slice_index") || !body["slice_index"].is_number_integer())
        return reply_error(res, 400, "slice_index must be an integer");
    const auto k = body["slice_index"].get<int64_t>();
    const auto shape = s->volume.shape();
    if (k < 0 || k >= shape.depth) return reply_error(res, 416, "slice index out of range");

    const std::string mode = body.value("mode", std::string("auto"));
    if (mode != "auto" && mode != "prompt") return reply_error(res, 422, "mode must be 'auto' or 'prompt'");
    const bool has_prompts = body.contains("prompts") && !body["prompts"].is_null();
    std::optional<PromptSet> prompts;
    if (mode == "prompt") {
        if (!has_prompts) return reply_error(res, 422, "prompt mode needs prompts");
        try {
            prompts = prompts_from_json(body["prompts"]);
            validate_prompts(*prompts, shape.height, shape.width);
        } catch (const Error& e) {
            return reply_error(res, 422, e.what());
        }
    } else if (has_prompts) {
        return reply_error(res, 422, "prompts are only accepted in prompt mode");
    }
    if (body.contains("use_depth_attention") && !body["use_depth_attention"].is_boolean())
        return reply_error(res, 400, "use_depth_attention must be a boolean");
    const bool use_attn = body.value("use_depth_attention", false);

    std::shared_lock model_lock(model_mu);
    if (!model2d) return reply_error(res, 503, "no model loaded");
    if (use_attn && !model3d) return reply_error(res, 409, "depth attention requested but no 3D model is loaded");

    SliceInput in{extract_slice(s->volume, k), prompts ? &*prompts : nullptr, std::nullopt};
    double gate = 1.0;
    if (use_attn) {
        ProbabilityVolume pv;
        {
            std::lock_guard lock(s->mu);
            if (!s->pv || s->pv_generation != model3d->generation) {
                VNet net = model3d->net;
                s->pv = predict_probability_volume(net, s->volume);
                s->pv_generation = model3d->generation;
            }
            pv = *s->pv;
        }
        auto map = compute_depth_attention(pv, k, shape.depth, cfg.attention);
        FloatPlane lr(map.values.height(), map.values.width());
        for (size_t i = 0; i < lr.data().size(); ++i) lr.data()[i] = static_cast<float>(map.values.data()[i]);
        in.attention = resize_bilinear(lr, shape.height, shape.width);
        gate = model2d->model->fusion->g.item<double>();
    }
    Sam2d model = model2d->model;
    auto masks = predict_slices(model, {in}, use_attn ? std::nullopt : std::optional<double>(1.0));
    const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    reply_json(res, 200,
               json{{"mask_rle", rle_to_json(rle_encode(masks.front().data()))},
                    {"shape", {shape.height, shape.width}},
                    {"latency_ms", ms},
                    {"gate_g", gate}});
}

void Service::Impl::model_info(httplib::Response& res) {
    std::shared_lock lock(model_mu);
    if (!model2d) return reply_error(res, 503, "no model loaded");
    reply_json(res, 200,
               json{{"hash", model2d->hash},
                    {"cfg", model2d->bundle.cfg},
                    {"stage", model2d->bundle.stage},
                    {"seed", model2d->bundle.seed},
                    {"provenance", model2d->bundle.provenance},
                    {"has_3d", model3d != nullptr},
                    {"hash_3d", model3d ? json(model3d->hash) : json(nullptr)}});
}

Service::Service(ServiceConfig cfg) : impl_(std::make_unique<Impl>()) {
    cfg.attention.validate();
    impl_->cfg = std::move(cfg);
    impl_->routes();
    if (!impl_->cfg.model_path.empty()) load_model(impl_->cfg.model_path);
    if (!impl_->cfg.model3d_path.empty()) load_model3d(impl_->cfg.model3d_path);
}

Service::~Service() { stop(); }

void Service::load_model(const std::filesystem::path& path) {
    auto m = std::make_shared<Model2d>();
    m->bundle = load_bundle(path);
    m->model = sam2d_from_bundle(m->bundle);
    m->hash = file_sha256(path);
    std::unique_lock lock(impl_->model_mu);
    impl_->model2d = std::move(m);
    log::info("service.model", {{"path", path.string()}, {"stage", impl_->model2d->bundle.stage}});
}

void Service::load_model3d(const std::filesystem::path& path) {
    auto m = std::make_shared<Model3d>();
    m->net = vnet_from_bundle(load_bundle(path));
    m->hash = file_sha256(path);
    std::unique_lock lock(impl_->model_mu);
    m->generation = ++impl_->generation3d;
    impl_->model3d = std::move(m);
    log::info("service.model3d", {{"path", path.string()}});
}

int Service::bind() {
    int port = impl_->cfg.port;
    if (port == 0) {
        port = impl_->server.bind_to_any_port(impl_->cfg.host);
        if (port < 0) throw io_error("cannot bind " + impl_->cfg.host);
    } else if (!impl_->server.bind_to_port(impl_->cfg.host, port)) {
        throw io_error("cannot bind " + impl_->cfg.host + ":" + std::to_string(port));
    }
    log::info("service.listen", {{"host", impl_->cfg.host}, {"port", port}});
    return port;
}

void Service::serve() { impl_->server.listen_after_bind(); }

void Service::stop() {
    if (impl_) impl_->server.stop();
}

}  // namespace sabone
