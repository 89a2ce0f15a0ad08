#include "prosona/service.hpp"

#include <cmath>

#include <httplib.h>

#include "prosona/image_io.hpp"

namespace prosona::service {

using nlohmann::json;
using nlohmann::ordered_json;

AdmissionGate::AdmissionGate(int slots, int queue) : slots_(slots), capacity_(slots + queue) {
  if (slots < 1 || queue < 0) throw ConfigError("service: workers must be >= 1 and max_queue >= 0");
}

bool AdmissionGate::try_enter() {
  std::unique_lock lock(mu_);
  if (admitted_ >= capacity_) return false;
  ++admitted_;
  cv_.wait(lock, [&] { return running_ < slots_; });
  ++running_;
  return true;
}

void AdmissionGate::leave() {
  {
    std::lock_guard lock(mu_);
    --running_;
    --admitted_;
  }
  cv_.notify_one();
}

int AdmissionGate::admitted() const {
  std::lock_guard lock(mu_);
  return admitted_;
}

namespace {

/// Maps a request error to its HTTP status.
struct HttpError : Error {
  int status;
  HttpError(int s, const std::string& what) : Error(what), status(s) {}
};

HttpResponse error_response(int status, const std::string& message) {
  return {status, ordered_json{{"error", message}, {"status", status}}.dump()};
}

const json& require(const json& req, const char* key) {
  if (!req.contains(key) || req.at(key).is_null()) throw HttpError(400, std::string("missing field: ") + key);
  return req.at(key);
}

std::string require_string(const json& req, const char* key) {
  const auto& v = require(req, key);
  if (!v.is_string()) throw HttpError(400, std::string(key) + " must be a string");
  return v.get<std::string>();
}

std::uint64_t require_seed(const json& req) {
  const auto& v = require(req, "seed");
  if (!v.is_number_integer() || (v.is_number_integer() && !v.is_number_unsigned() && v.get<std::int64_t>() < 0))
    throw HttpError(400, "seed must be a non-negative integer");
  return v.get<std::uint64_t>();
}

json parse_body(const std::string& body) {
  json j;
  try {
    j = json::parse(body);
  } catch (const json::parse_error& e) {
    throw HttpError(400, std::string("malformed JSON: ") + e.what());
  }
  if (!j.is_object()) throw HttpError(400, "request body must be a JSON object");
  return j;
}

int request_k(const json& req, int fallback) {
  if (!req.contains("K") || req.at("K").is_null()) return fallback;
  const auto& v = req.at("K");
  if (!v.is_number_integer() || v.get<std::int64_t>() < 1 || v.get<std::int64_t>() > 1000) throw HttpError(400, "K must be an integer in [1, 1000]");
  return v.get<int>();
}

double request_threshold(const json& req, double fallback) {
  if (!req.contains("threshold") || req.at("threshold").is_null()) return fallback;
  const auto& v = req.at("threshold");
  if (!v.is_number()) throw HttpError(400, "threshold must be a number");
  const double t = v.get<double>();
  if (!(t > 0.0 && t < 1.0)) throw HttpError(400, "threshold must lie in (0, 1)");
  return t;
}

std::string png_b64(const io::Raster& r) { return io::base64_encode(io::encode_png(r)); }

io::Raster prob_raster(const ProbabilityMap& p) {
  io::Raster r{p.height, p.width, 1, std::vector<std::uint8_t>(p.size())};
  for (std::size_t i = 0; i < p.size(); ++i)
    r.pixels[i] = static_cast<std::uint8_t>(std::lround(std::clamp(p.values[i], 0.0, 1.0) * 255.0));
  return r;
}

}  // namespace

InferenceService::InferenceService(ServiceOptions options)
    : options_(std::move(options)), started_(std::chrono::steady_clock::now()), gate_(options_.workers, options_.max_queue) {}

InferenceService::~InferenceService() { stop(); }

void InferenceService::set_dataset(data::DatasetManifest manifest) { manifest_ = std::move(manifest); }

void InferenceService::set_model(LoadedModel loaded) {
  if (ready_.load()) throw StateError("model already loaded");
  loaded_ = std::make_shared<const LoadedModel>(std::move(loaded));
  ready_.store(true, std::memory_order_release);
}

HttpResponse InferenceService::health() const {
  const bool ready = ready_.load(std::memory_order_acquire);
  const double uptime = std::chrono::duration<double>(std::chrono::steady_clock::now() - started_).count();
  ordered_json j{{"status", ready ? "ready" : "loading"},
                 {"checkpoint_id", ready ? json(loaded_->checkpoint_id) : json(nullptr)},
                 {"uptime", uptime}};
  return {200, j.dump()};
}

HttpResponse InferenceService::cases() const {
  ordered_json arr = ordered_json::array();
  if (manifest_) {
    for (const auto& c : manifest_->cases)
      arr.push_back({{"case_id", c.case_id}, {"split", data::to_string(c.split)}, {"annotator_count", c.mask_paths.size()}});
  }
  return {200, arr.dump()};
}

Image InferenceService::resolve_image(const json& req) const {
  const bool has_case = req.contains("case_id") && !req.at("case_id").is_null();
  const bool has_image = req.contains("image") && !req.at("image").is_null();
  if (has_case == has_image) throw HttpError(400, "provide exactly one of case_id or image");
  const auto& m = loaded_->model;
  if (has_case) {
    const std::string id = require_string(req, "case_id");
    if (!manifest_) throw HttpError(404, "unknown case: " + id);
    try {
      return data::load_case(*manifest_, id).image;
    } catch (const LookupError&) {
      throw HttpError(404, "unknown case: " + id);
    }
  }
  io::Raster r;
  try {
    r = io::decode_png(io::base64_decode(require_string(req, "image")), "request image");
  } catch (const Error& e) {
    throw HttpError(400, std::string("image is not a valid base64 PNG: ") + e.what());
  }
  if (r.channels != 1) throw HttpError(400, "image must be grayscale");
  if (r.height != m.arch().height || r.width != m.arch().width)
    throw HttpError(400, "image must be " + std::to_string(m.arch().height) + "x" + std::to_string(m.arch().width));
  return io::image_from_raster(r);
}

HttpResponse InferenceService::guarded(const std::function<HttpResponse()>& fn) const {
  if (!ready_.load(std::memory_order_acquire)) return error_response(409, "model not loaded");
  if (!gate_.try_enter()) return error_response(429, "server busy");
  struct Leave {
    AdmissionGate& g;
    ~Leave() { g.leave(); }
  } leave{gate_};
  try {
    return fn();
  } catch (const HttpError& e) {
    return error_response(e.status, e.what());
  } catch (const ValidationError& e) {
    return error_response(400, e.what());
  } catch (const LookupError& e) {
    return error_response(404, e.what());
  } catch (const StateError& e) {
    return error_response(409, e.what());
  } catch (const std::exception& e) {
    return error_response(500, e.what());
  }
}

namespace {

ordered_json prediction_json(const prompt::Personalization& p, double threshold, int k, const LoadedModel& lm, double latency_ms) {
  const Mask mask = binarize(p.map, threshold);
  return {{"mask", png_b64(io::to_raster(mask))},
          {"prob_map", png_b64(prob_raster(p.map))},
          {"similarity", {{"scores", p.profile.scores}, {"weights", p.profile.weights}}},
          {"area", mask_area(mask)},
          {"latency_ms", latency_ms},
          {"model_info", {{"checkpoint_id", lm.checkpoint_id}, {"stage", lm.model.stage()}, {"K", k}, {"threshold", threshold}}}};
}

}  // namespace

HttpResponse InferenceService::predict(const std::string& body) const {
  return guarded([&] {
    const auto t0 = std::chrono::steady_clock::now();
    const json req = parse_body(body);
    const std::string text = require_string(req, "prompt");
    if (text.empty()) throw HttpError(400, "prompt must be non-empty");
    const std::uint64_t seed = require_seed(req);
    const int k = request_k(req, options_.default_k);
    const double thr = request_threshold(req, options_.default_threshold);
    const Image img = resolve_image(req);
    const auto& lm = *loaded_;
    const auto p = prompt::personalize(img, text, lm.model, *lm.encoder, k, seed);
    const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    return HttpResponse{200, prediction_json(p, thr, k, lm, ms).dump()};
  });
}

HttpResponse InferenceService::interpolate(const std::string& body) const {
  return guarded([&] {
    const auto t0 = std::chrono::steady_clock::now();
    const json req = parse_body(body);
    const std::string a = require_string(req, "prompt_a");
    const std::string b = require_string(req, "prompt_b");
    if (a.empty() || b.empty()) throw HttpError(400, "prompts must be non-empty");
    const auto& tv = require(req, "t");
    if (!tv.is_number()) throw HttpError(400, "t must be a number");
    const double t = tv.get<double>();
    if (!(t >= 0.0 && t <= 1.0)) throw HttpError(400, "t must lie in [0, 1]");
    const std::uint64_t seed = require_seed(req);
    const int k = request_k(req, options_.default_k);
    const double thr = request_threshold(req, options_.default_threshold);
    const Image img = resolve_image(req);
    const auto& lm = *loaded_;
    const auto p = prompt::interpolate(img, a, b, t, lm.model, *lm.encoder, k, seed);
    const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    auto j = prediction_json(p, thr, k, lm, ms);
    j["t"] = t;
    return HttpResponse{200, j.dump()};
  });
}

int InferenceService::bind() {
  server_ = std::make_unique<httplib::Server>();
  // Admission (and 429s) happen in the handlers, so the socket pool must exceed the gate.
  const std::size_t pool = static_cast<std::size_t>(options_.workers + options_.max_queue + 4);
  server_->new_task_queue = [pool] { return new httplib::ThreadPool(pool); };
  server_->set_default_headers({{"Access-Control-Allow-Origin", options_.cors_origin},
                                {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"},
                                {"Access-Control-Allow-Headers", "Content-Type"}});
  auto reply = [](httplib::Response& res, const HttpResponse& r) {
    res.status = r.status;
    res.set_content(r.body, "application/json");
  };
  server_->Get("/health", [this, reply](const httplib::Request&, httplib::Response& res) { reply(res, health()); });
  server_->Get("/cases", [this, reply](const httplib::Request&, httplib::Response& res) { reply(res, cases()); });
  server_->Post("/predict", [this, reply](const httplib::Request& req, httplib::Response& res) { reply(res, predict(req.body)); });
  server_->Post("/interpolate",
                [this, reply](const httplib::Request& req, httplib::Response& res) { reply(res, interpolate(req.body)); });
  server_->Options(R"(/.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });
  if (options_.port == 0) return server_->bind_to_any_port(options_.host);
  return server_->bind_to_port(options_.host, options_.port) ? options_.port : -1;
}

void InferenceService::listen_after_bind() {
  if (!server_) throw StateError("bind() must be called first");
  server_->listen_after_bind();
}

bool InferenceService::listen() {
  if (bind() < 0) return false;
  listen_after_bind();
  return true;
}

void InferenceService::stop() {
  if (server_) server_->stop();
}

}  // namespace prosona::service
