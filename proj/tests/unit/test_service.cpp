#include <doctest.h>

#include <future>
#include <thread>

#include <httplib.h>
#include <json.hpp>

#include "probe.hpp"
#include "prosona/image_io.hpp"
#include "prosona/service.hpp"
#include "temp_dir.hpp"

using namespace prosona;
using namespace prosona::service;
using nlohmann::json;

namespace {

struct ServiceFixture {
  testutil::TempDir dir{"service"};
  data::DatasetManifest manifest;
  InferenceService svc{ServiceOptions{.port = 0, .workers = 2, .max_queue = 4, .default_k = 4}};

  ServiceFixture() {
    data::GenerationConfig g;
    g.height = g.width = 16;
    g.num_cases = 8;
    g.annotators = 2;
    g.seed = 4;
    manifest = data::generate_dataset(g, dir / "data");
    svc.set_dataset(manifest);
  }

  void load() {
    auto m = testutil::probe_model(6);
    m.set_stage(2);
    svc.set_model(LoadedModel{std::move(m), prompt::make_text_encoder("fallback"), "probe"});
  }

  [[nodiscard]] std::string case_id() const { return manifest.cases.front().case_id; }
};

json body(const HttpResponse& r) { return json::parse(r.body); }

std::string predict_request(const std::string& case_id, const std::string& prompt, std::uint64_t seed) {
  return json{{"case_id", case_id}, {"prompt", prompt}, {"seed", seed}}.dump();
}

}  // namespace

TEST_SUITE("service") {
  TEST_CASE("health and cases before and after loading") {
    ServiceFixture fx;
    CHECK(body(fx.svc.health())["status"] == "loading");
    CHECK(body(fx.svc.health())["checkpoint_id"].is_null());
    const auto early = fx.svc.predict(predict_request(fx.case_id(), "conservative mask", 1));
    CHECK(early.status == 409);
    CHECK(body(early).contains("error"));

    fx.load();
    CHECK(body(fx.svc.health())["status"] == "ready");
    CHECK(body(fx.svc.health())["checkpoint_id"] == "probe");
    const auto cases = body(fx.svc.cases());
    CHECK(cases.size() == 8);
    CHECK(cases[0]["annotator_count"] == 2);
    CHECK(cases[0].contains("split"));
  }

  TEST_CASE("predict response shape and determinism") {
    ServiceFixture fx;
    fx.load();
    const auto r = fx.svc.predict(predict_request(fx.case_id(), "inclusive mask", 9));
    REQUIRE(r.status == 200);
    const auto j = body(r);
    const auto mask = io::decode_png(io::base64_decode(j["mask"].get<std::string>()));
    CHECK(mask.width == 16);
    CHECK(mask.height == 16);
    CHECK(j["similarity"]["weights"].size() == 4);
    double total = 0.0;
    for (const auto& w : j["similarity"]["weights"]) total += w.get<double>();
    CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(j["model_info"]["checkpoint_id"] == "probe");
    CHECK(j["model_info"]["K"] == 4);

    const auto again = body(fx.svc.predict(predict_request(fx.case_id(), "inclusive mask", 9)));
    CHECK(again["mask"] == j["mask"]);
    CHECK(again["prob_map"] == j["prob_map"]);
    CHECK(again["similarity"] == j["similarity"]);
  }

  TEST_CASE("a single sample gets all the weight") {
    ServiceFixture fx;
    fx.load();
    const auto j = body(fx.svc.predict(json{{"case_id", fx.case_id()}, {"prompt", "x"}, {"seed", 1}, {"K", 1}}.dump()));
    CHECK(j["similarity"]["weights"] == json::array({1.0}));
  }

  TEST_CASE("inline images are accepted") {
    ServiceFixture fx;
    fx.load();
    const auto c = data::load_case(fx.manifest, fx.case_id());
    const std::string png = io::base64_encode(io::encode_png(io::to_raster(c.image)));
    const auto by_id = body(fx.svc.predict(predict_request(fx.case_id(), "conservative mask", 2)));
    const auto inline_req = body(fx.svc.predict(json{{"image", png}, {"prompt", "conservative mask"}, {"seed", 2}}.dump()));
    CHECK(inline_req["mask"] == by_id["mask"]);
  }

  TEST_CASE("validation errors and unknown cases") {
    ServiceFixture fx;
    fx.load();
    const std::string id = fx.case_id();
    CHECK(fx.svc.predict("{").status == 400);
    CHECK(fx.svc.predict("[]").status == 400);
    CHECK(fx.svc.predict(json{{"case_id", id}, {"seed", 1}}.dump()).status == 400);
    CHECK(fx.svc.predict(json{{"case_id", id}, {"prompt", ""}, {"seed", 1}}.dump()).status == 400);
    CHECK(fx.svc.predict(json{{"case_id", id}, {"prompt", "a"}}.dump()).status == 400);
    CHECK(fx.svc.predict(json{{"case_id", id}, {"prompt", "a"}, {"seed", -1}}.dump()).status == 400);
    CHECK(fx.svc.predict(json{{"case_id", id}, {"prompt", "a"}, {"seed", 1}, {"K", 0}}.dump()).status == 400);
    CHECK(fx.svc.predict(json{{"case_id", id}, {"prompt", "a"}, {"seed", 1}, {"threshold", 1.0}}.dump()).status == 400);
    CHECK(fx.svc.predict(json{{"prompt", "a"}, {"seed", 1}}.dump()).status == 400);
    CHECK(fx.svc.predict(json{{"image", "@@@"}, {"prompt", "a"}, {"seed", 1}}.dump()).status == 400);
    const std::string small = io::base64_encode(io::encode_png(io::to_raster(Image(8, 8, 0.5))));
    CHECK(fx.svc.predict(json{{"image", small}, {"prompt", "a"}, {"seed", 1}}.dump()).status == 400);
    CHECK(fx.svc.predict(predict_request("no_such_case", "a", 1)).status == 404);

    auto interp = [&](const json& t) {
      return fx.svc.interpolate(json{{"case_id", id}, {"prompt_a", "a"}, {"prompt_b", "b"}, {"t", t}, {"seed", 1}}.dump()).status;
    };
    CHECK(interp(1.5) == 400);
    CHECK(interp(-0.1) == 400);
    CHECK(interp("half") == 400);
    CHECK(interp(0.5) == 200);
  }

  TEST_CASE("interpolation endpoints reproduce the predictions byte for byte") {
    ServiceFixture fx;
    fx.load();
    const std::string id = fx.case_id();
    auto interp = [&](double t) {
      return body(fx.svc.interpolate(
          json{{"case_id", id}, {"prompt_a", "conservative mask"}, {"prompt_b", "inclusive mask"}, {"t", t}, {"seed", 5}}.dump()));
    };
    const auto a = body(fx.svc.predict(predict_request(id, "conservative mask", 5)));
    const auto b = body(fx.svc.predict(predict_request(id, "inclusive mask", 5)));
    CHECK(interp(0.0)["mask"] == a["mask"]);
    CHECK(interp(0.0)["prob_map"] == a["prob_map"]);
    CHECK(interp(1.0)["mask"] == b["mask"]);
    CHECK(interp(1.0)["prob_map"] == b["prob_map"]);
    CHECK(interp(0.5)["t"] == 0.5);
  }

  TEST_CASE("concurrent requests match sequential ones") {
    ServiceFixture fx;
    fx.load();
    std::vector<std::string> requests;
    for (int i = 0; i < 8; ++i) requests.push_back(predict_request(fx.manifest.cases[static_cast<std::size_t>(i)].case_id, "mask", 100 + i));
    std::vector<std::string> sequential;
    for (const auto& r : requests) sequential.push_back(body(fx.svc.predict(r))["prob_map"].get<std::string>());
    std::vector<std::future<HttpResponse>> futures;
    for (const auto& r : requests) futures.push_back(std::async(std::launch::async, [&fx, r] { return fx.svc.predict(r); }));
    for (std::size_t i = 0; i < futures.size(); ++i) {
      const auto r = futures[i].get();
      REQUIRE(r.status == 200);
      CHECK(body(r)["prob_map"].get<std::string>() == sequential[i]);
    }
  }

  TEST_CASE("admission gate bounds running plus waiting requests") {
    AdmissionGate gate(1, 1);
    REQUIRE(gate.try_enter());
    auto waiter = std::async(std::launch::async, [&] { return gate.try_enter(); });
    while (gate.admitted() < 2) std::this_thread::yield();
    CHECK_FALSE(gate.try_enter());
    gate.leave();
    CHECK(waiter.get());
    gate.leave();
    CHECK(gate.admitted() == 0);
    CHECK_THROWS_AS(AdmissionGate(0, 1), ConfigError);
  }

  TEST_CASE("the model can only be loaded once") {
    ServiceFixture fx;
    fx.load();
    CHECK_THROWS_AS(fx.load(), StateError);
  }

  TEST_CASE("HTTP transport with CORS") {
    ServiceFixture fx;
    fx.load();
    const int port = fx.svc.bind();
    REQUIRE(port > 0);
    std::thread server([&] { fx.svc.listen_after_bind(); });
    httplib::Client client("127.0.0.1", port);
    client.set_read_timeout(30, 0);

    auto health = client.Get("/health");
    REQUIRE(health);
    CHECK(health->status == 200);
    CHECK(health->get_header_value("Access-Control-Allow-Origin") == "*");

    auto pre = client.Options("/predict");
    REQUIRE(pre);
    CHECK(pre->status == 204);
    CHECK(pre->get_header_value("Access-Control-Allow-Methods").find("POST") != std::string::npos);

    const std::string req = predict_request(fx.case_id(), "inclusive mask", 3);
    auto res = client.Post("/predict", req, "application/json");
    REQUIRE(res);
    CHECK(res->status == 200);
    CHECK(json::parse(res->body)["prob_map"] == body(fx.svc.predict(req))["prob_map"]);

    auto bad = client.Post("/predict", "{", "application/json");
    REQUIRE(bad);
    CHECK(bad->status == 400);

    fx.svc.stop();
    server.join();
  }
}
