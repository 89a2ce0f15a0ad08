#pragma once

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <string>

#include <json.hpp>

#include "prosona/backbone.hpp"
#include "prosona/prompt_engine.hpp"
#include "prosona/synthetic_data.hpp"

namespace httplib {
class Server;
}

namespace prosona::service {

struct ServiceOptions {
  std::string host = "127.0.0.1";
  int port = 8080;     // 0 = pick a free port
  int workers = 4;     // concurrent inference slots
  int max_queue = 16;  // requests allowed to wait for a slot before 429
  std::string cors_origin = "*";
  int default_k = 10;
  double default_threshold = 0.5;
};

/// Counting gate with a bounded wait line. try_enter() fails instead of queueing when
/// `slots + queue` requests are already admitted.
class AdmissionGate {
 public:
  AdmissionGate(int slots, int queue);
  [[nodiscard]] bool try_enter();
  void leave();
  [[nodiscard]] int admitted() const;

 private:
  mutable std::mutex mu_;
  std::condition_variable cv_;
  int slots_;
  int capacity_;
  int admitted_ = 0;
  int running_ = 0;
};

struct HttpResponse {
  int status = 200;
  std::string body;  // JSON
};

struct LoadedModel {
  model::Model model;
  std::unique_ptr<prompt::TextEncoder> encoder;
  std::string checkpoint_id;
};

/// Holds the immutable model once loaded; every handler is safe to call concurrently.
class InferenceService {
 public:
  explicit InferenceService(ServiceOptions options);
  ~InferenceService();

  /// Dataset used by /cases and case_id lookups. Optional; without it only inline images work.
  void set_dataset(data::DatasetManifest manifest);
  /// Transitions the service from "loading" to "ready". Call once.
  void set_model(LoadedModel loaded);

  [[nodiscard]] HttpResponse health() const;
  [[nodiscard]] HttpResponse cases() const;
  [[nodiscard]] HttpResponse predict(const std::string& body) const;
  [[nodiscard]] HttpResponse interpolate(const std::string& body) const;

  /// Binds and serves until stop(). Returns false when binding fails.
  bool listen();
  /// Binds to options.port (or a free port when 0) and returns the bound port without blocking.
  int bind();
  void listen_after_bind();
  void stop();

 private:
  HttpResponse guarded(const std::function<HttpResponse()>& fn) const;
  [[nodiscard]] Image resolve_image(const nlohmann::json& req) const;

  ServiceOptions options_;
  std::optional<data::DatasetManifest> manifest_;
  std::shared_ptr<const LoadedModel> loaded_;
  std::atomic<bool> ready_{false};
  std::chrono::steady_clock::time_point started_;
  mutable AdmissionGate gate_;
  std::unique_ptr<httplib::Server> server_;
};

}  // namespace prosona::service
