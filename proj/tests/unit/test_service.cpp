#include <gtest/gtest.h>

#include <thread>

#include <httplib.h>
#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "sabone/bundle.hpp"
#include "sabone/inference.hpp"
#include "sabone/png.hpp"
#include "sabone/rle.hpp"
#include "sabone/sam2d.hpp"
#include "sabone/service.hpp"
#include "test_util.hpp"

using namespace sabone;
using nlohmann::json;
using sabone::testing::TempDir;

namespace {

Sam2dConfig toy_config() {
    Sam2dConfig c;
    c.encoder.image_size = 32;
    c.encoder.embed_dim = 16;
    c.encoder.depth = 1;
    c.encoder.num_heads = 2;
    c.encoder.out_chans = 16;
    c.decoder.depth = 1;
    c.decoder.num_heads = 2;
    c.decoder.mlp_dim = 32;
    return c;
}

Volume ramp_volume(Shape3 s) {
    Volume v;
    v.data = Grid3<float>(s);
    for (int64_t d = 0; d < s.depth; ++d)
        for (int64_t h = 0; h < s.height; ++h)
            for (int64_t w = 0; w < s.width; ++w)
                v.data.at(d, h, w) = static_cast<float>((h - 10) * (h - 10) + (w - 8) * (w - 8) < 30 ? 1.0 : 0.2 * d);
    v.sequence_tag = "t1";
    v.patient_id = "p";
    v.location_tag = "knee";
    return v;
}

class ServiceTest : public ::testing::Test {
protected:
    void SetUp() override {
        torch::manual_seed(5);
        model = Sam2d(toy_config());
        {
            torch::NoGradGuard ng;
            model->fusion->g.fill_(0.4);
        }
        model->eval();
        save_bundle(to_bundle(model, "FUSION", 5, {{"note", "unit"}}), dir / "m2d.bundle");
        torch::manual_seed(6);
        VNet net(2);
        save_bundle(to_bundle(net, 6), dir / "m3d.bundle");
    }

    void start(bool with_2d, bool with_3d) {
        ServiceConfig cfg;
        cfg.host = "127.0.0.1";
        cfg.port = 0;
        if (with_2d) cfg.model_path = dir / "m2d.bundle";
        if (with_3d) cfg.model3d_path = dir / "m3d.bundle";
        service = std::make_unique<Service>(cfg);
        port = service->bind();
        thread = std::thread([this] { service->serve(); });
        client = std::make_unique<httplib::Client>("127.0.0.1", port);
        for (int i = 0; i < 100 && !client->Get("/v1/model"); ++i) std::this_thread::sleep_for(std::chrono::milliseconds(10));
    }

    void TearDown() override {
        if (service) service->stop();
        if (thread.joinable()) thread.join();
    }

    std::string upload(const Volume& v) {
        auto r = client->Post("/v1/volumes", pack_volume_archive(v), "application/octet-stream");
        EXPECT_TRUE(r);
        EXPECT_EQ(r->status, 200) << r->body;
        return json::parse(r->body)["volume_id"].get<std::string>();
    }

    httplib::Result segment(const json& body) { return client->Post("/v1/segment", body.dump(), "application/json"); }

    TempDir dir;
    Sam2d model{nullptr};
    std::unique_ptr<Service> service;
    std::thread thread;
    std::unique_ptr<httplib::Client> client;
    int port = 0;
};

}  // namespace

TEST_F(ServiceTest, UploadAssignsFreshIds) {
    start(true, false);
    Volume v;
    v.data = Grid3<float>({4, 4, 4}, 0.0f);
    auto r = client->Post("/v1/volumes", pack_volume_archive(v), "application/octet-stream");
    ASSERT_TRUE(r);
    auto j = json::parse(r->body);
    EXPECT_EQ(j["depth"], 4);
    EXPECT_EQ(j["height"], 4);
    auto again = client->Post("/v1/volumes", pack_volume_archive(v), "application/octet-stream");
    EXPECT_NE(json::parse(again->body)["volume_id"], j["volume_id"]);
    EXPECT_EQ(r->get_header_value("Access-Control-Allow-Origin"), "*");
}

TEST_F(ServiceTest, MultipartUploadAndMalformedArchives) {
    start(true, false);
    Volume v = ramp_volume({3, 5, 6});
    std::string packed = pack_volume_archive(v);
    uint64_t n = 0;
    std::memcpy(&n, packed.data(), 8);
    httplib::MultipartFormDataItems items{{"header", packed.substr(8, n), "v.json", "application/json"},
                                          {"raw", packed.substr(8 + n), "v.raw", "application/octet-stream"}};
    auto r = client->Post("/v1/volumes", items);
    ASSERT_TRUE(r);
    EXPECT_EQ(r->status, 200) << r->body;
    EXPECT_EQ(json::parse(r->body)["width"], 6);
    auto truncated = client->Post("/v1/volumes", packed.substr(0, packed.size() - 3), "application/octet-stream");
    EXPECT_EQ(truncated->status, 400);
    httplib::MultipartFormDataItems bad{{"header", packed.substr(8, n), "v.json", "application/json"},
                                        {"raw", packed.substr(8 + n, 10), "v.raw", "application/octet-stream"}};
    EXPECT_EQ(client->Post("/v1/volumes", bad)->status, 400);
}

TEST_F(ServiceTest, SlicePngs) {
    start(true, false);
    Volume c;
    c.data = Grid3<float>({2, 3, 4}, 7.0f);
    const auto id = upload(c);
    auto r = client->Get("/v1/volumes/" + id + "/slices/1");
    ASSERT_EQ(r->status, 200);
    EXPECT_EQ(r->get_header_value("Content-Type"), "image/png");
    auto img = decode_png_gray8(r->body);
    EXPECT_EQ(img.height(), 3);
    EXPECT_EQ(img.width(), 4);
    for (auto px : img.data()) EXPECT_EQ(px, img.data()[0]);
    EXPECT_EQ(client->Get("/v1/volumes/" + id + "/slices/1")->body, r->body);
    EXPECT_EQ(client->Get("/v1/volumes/" + id + "/slices/2")->status, 416);
    EXPECT_EQ(client->Get("/v1/volumes/" + id + "/slices/-1")->status, 416);
    EXPECT_EQ(client->Get("/v1/volumes/vol-999/slices/0")->status, 404);
}

TEST_F(ServiceTest, SegmentAutoMatchesDirectInference) {
    start(true, false);
    Volume v = ramp_volume({4, 20, 18});
    const auto id = upload(v);
    auto r1 = segment({{"volume_id", id}, {"slice_index", 2}, {"mode", "auto"}});
    ASSERT_EQ(r1->status, 200) << r1->body;
    auto j = json::parse(r1->body);
    EXPECT_EQ(j["shape"], json::array({20, 18}));
    EXPECT_EQ(j["gate_g"].get<double>(), 1.0);
    EXPECT_GE(j["latency_ms"].get<double>(), 0.0);
    auto mask = rle_decode(rle_from_json(j["mask_rle"]), 20 * 18);
    EXPECT_EQ(mask.size(), 360u);
    auto r2 = segment({{"volume_id", id}, {"slice_index", 2}, {"mode", "auto"}, {"use_depth_attention", false}});
    EXPECT_EQ(json::parse(r2->body)["mask_rle"], j["mask_rle"]);
    auto direct = predict_slices(model, {SliceInput{extract_slice(v, 2), nullptr, std::nullopt}}, 1.0);
    EXPECT_EQ(direct[0].data(), mask);
}

TEST_F(ServiceTest, SegmentPromptMode) {
    start(true, false);
    Volume v = ramp_volume({2, 20, 18});
    const auto id = upload(v);
    json prompts = {{"points", {{8, 10}}}};
    auto r = segment({{"volume_id", id}, {"slice_index", 0}, {"mode", "prompt"}, {"prompts", prompts}});
    ASSERT_EQ(r->status, 200) << r->body;
    PromptSet p = prompts_from_json(prompts);
    auto direct = predict_slices(model, {SliceInput{extract_slice(v, 0), &p, std::nullopt}}, 1.0);
    EXPECT_EQ(rle_decode(rle_from_json(json::parse(r->body)["mask_rle"]), 360), direct[0].data());
    json box = {{"box", {2, 3, 12, 15}}};
    EXPECT_EQ(segment({{"volume_id", id}, {"slice_index", 0}, {"mode", "prompt"}, {"prompts", box}})->status, 200);
}

TEST_F(ServiceTest, SegmentErrorStatuses) {
    start(true, false);
    const auto id = upload(ramp_volume({2, 20, 18}));
    EXPECT_EQ(client->Post("/v1/segment", "{not json", "application/json")->status, 400);
    EXPECT_EQ(segment({{"slice_index", 0}})->status, 400);
    EXPECT_EQ(segment({{"volume_id", "vol-77"}, {"slice_index", 0}, {"mode", "auto"}})->status, 404);
    EXPECT_EQ(segment({{"volume_id", id}, {"slice_index", 2}, {"mode", "auto"}})->status, 416);
    EXPECT_EQ(segment({{"volume_id", id}, {"slice_index", 0}, {"mode", "magic"}})->status, 422);
    EXPECT_EQ(segment({{"volume_id", id}, {"slice_index", 0}, {"mode", "prompt"}})->status, 422);
    EXPECT_EQ(segment({{"volume_id", id}, {"slice_index", 0}, {"mode", "prompt"}, {"prompts", {{"points", {{1}}}}}})->status,
              422);
    EXPECT_EQ(segment({{"volume_id", id}, {"slice_index", 0}, {"mode", "prompt"}, {"prompts", {{"points", {{99, 1}}}}}})->status,
              422);
    EXPECT_EQ(segment({{"volume_id", id}, {"slice_index", 0}, {"mode", "prompt"}, {"prompts", {{"box", {5, 5, 2, 9}}}}})->status,
              422);
    EXPECT_EQ(segment({{"volume_id", id}, {"slice_index", 0}, {"mode", "auto"}, {"prompts", {{"points", {{1, 1}}}}}})->status,
              422);
    EXPECT_EQ(segment({{"volume_id", id}, {"slice_index", 0}, {"mode", "auto"}, {"use_depth_attention", true}})->status, 409);
}

TEST_F(ServiceTest, NoModelGives503) {
    start(false, false);
    EXPECT_EQ(client->Get("/v1/model")->status, 503);
    const auto id = upload(ramp_volume({2, 8, 8}));
    EXPECT_EQ(segment({{"volume_id", id}, {"slice_index", 0}, {"mode", "auto"}})->status, 503);
    service->load_model(dir / "m2d.bundle");
    EXPECT_EQ(client->Get("/v1/model")->status, 200);
}

TEST_F(ServiceTest, ModelInfoEchoesBundle) {
    start(true, false);
    auto r = client->Get("/v1/model");
    ASSERT_EQ(r->status, 200);
    auto j = json::parse(r->body);
    EXPECT_EQ(j["hash"], file_sha256(dir / "m2d.bundle"));
    EXPECT_EQ(j["stage"], "FUSION");
    EXPECT_EQ(j["has_3d"], false);
    EXPECT_EQ(to_json(sam2d_config_from_json(j["cfg"]["model"])), to_json(toy_config()));
    EXPECT_EQ(j["provenance"]["note"], "unit");
}

TEST_F(ServiceTest, DepthAttentionUsesLearnedGate) {
    start(true, true);
    Volume v = ramp_volume({6, 20, 18});
    const auto id = upload(v);
    auto r = segment({{"volume_id", id}, {"slice_index", 3}, {"mode", "auto"}, {"use_depth_attention", true}});
    ASSERT_EQ(r->status, 200) << r->body;
    auto j = json::parse(r->body);
    EXPECT_NEAR(j["gate_g"].get<double>(), 0.4, 1e-6);
    auto again = segment({{"volume_id", id}, {"slice_index", 3}, {"mode", "auto"}, {"use_depth_attention", true}});
    EXPECT_EQ(json::parse(again->body)["mask_rle"], j["mask_rle"]);

    torch::manual_seed(6);
    VNet net(2);
    auto pv = predict_probability_volume(net, v);
    auto map = compute_depth_attention(pv, 3, 6, AttentionConfig{});
    FloatPlane lr(map.values.height(), map.values.width());
    for (size_t i = 0; i < lr.data().size(); ++i) lr.data()[i] = static_cast<float>(map.values.data()[i]);
    SliceInput in{extract_slice(v, 3), nullptr, resize_bilinear(lr, 20, 18)};
    auto direct = predict_slices(model, {in});
    EXPECT_EQ(rle_decode(rle_from_json(j["mask_rle"]), 360), direct[0].data());
    auto info = json::parse(client->Get("/v1/model")->body);
    EXPECT_EQ(info["has_3d"], true);
    EXPECT_EQ(info["hash_3d"], file_sha256(dir / "m3d.bundle"));
}

TEST_F(ServiceTest, ConcurrentRequestsAgree) {
    start(true, false);
    const auto id = upload(ramp_volume({3, 20, 18}));
    const std::string expected = json::parse(segment({{"volume_id", id}, {"slice_index", 1}, {"mode", "auto"}})->body)["mask_rle"].dump();
    std::vector<std::thread> workers;
    std::atomic<int> ok{0};
    for (int t = 0; t < 4; ++t)
        workers.emplace_back([&] {
            httplib::Client c("127.0.0.1", port);
            for (int i = 0; i < 3; ++i) {
                auto r = c.Post("/v1/segment", json{{"volume_id", id}, {"slice_index", 1}, {"mode", "auto"}}.dump(),
                                "application/json");
                if (r && r->status == 200 && json::parse(r->body)["mask_rle"].dump() == expected) ++ok;
            }
        });
    for (auto& w : workers) w.join();
    EXPECT_EQ(ok.load(), 12);
}

TEST_F(ServiceTest, PreflightAllowed) {
    start(true, false);
    auto r = client->Options("/v1/segment");
    ASSERT_TRUE(r);
    EXPECT_EQ(r->status, 204);
    EXPECT_FALSE(r->get_header_value("Access-Control-Allow-Methods").empty());
}

TEST(ServiceConfigEnv, ReadsBindAddr) {
    ::setenv("BIND_ADDR", "0.0.0.0:9123", 1);
    ::setenv("MODEL_PATH", "/tmp/a.bundle", 1);
    ::unsetenv("MODEL3D_PATH");
    auto c = service_config_from_env();
    EXPECT_EQ(c.host, "0.0.0.0");
    EXPECT_EQ(c.port, 9123);
    EXPECT_EQ(c.model_path, "/tmp/a.bundle");
    EXPECT_TRUE(c.model3d_path.empty());
    ::setenv("BIND_ADDR", "localhost", 1);
    EXPECT_EQ(service_config_from_env().host, "localhost");
    ::unsetenv("BIND_ADDR");
    ::unsetenv("MODEL_PATH");
}

int main(int argc, char** argv) {
    ::testing::InitGoogleTest(&argc, argv);
    sabone::testing::quiet_logs();
    torch::set_num_threads(1);
    return RUN_ALL_TESTS();
}
