#pragma once

// Chat-completion generation behind one interface. Two implementations: an
// OpenAI-compatible HTTP client and a deterministic replay mock.
//
// Role folding for the wire format, which only knows system/user/assistant:
//   system      -> system
//   user        -> user
//   observation -> user,      content prefixed "<|observation|>\n"
//   domain      -> assistant, content prefixed "<|domain|>\n"
//   function    -> assistant, content prefixed "<|function|>\n"
//   assistant   -> assistant
// Consecutive messages are sent as-is; no merging.

#include <chrono>
#include <condition_variable>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <regex>
#include <string>
#include <thread>
#include <vector>

#include <httplib.h>

#include "spectod/prompt_builder.hpp"
#include "spectod/text.hpp"

namespace spectod {

enum class BackendErrorKind { kTimeout, kTransport, kHttpStatus, kMalformedResponse, kFixtureMiss, kInvalidRequest };

class BackendError : public Error {
 public:
  BackendError(BackendErrorKind kind, const std::string& what, int status = 0, int attempts = 1)
      : Error(what), kind_(kind), status_(status), attempts_(attempts) {}

  BackendErrorKind kind() const { return kind_; }
  int status() const { return status_; }
  int attempts() const { return attempts_; }

 private:
  BackendErrorKind kind_;
  int status_;
  int attempts_;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Identifies one generation: which dialogue, which turn, which task
/// ("DS", "DST", "RG", or "JUDGE:<criterion>").
struct RequestTag {
  std::string dialogue_id;
  int turn = 0;
  std::string task;

  std::string key() const { return dialogue_id + "#" + std::to_string(turn) + "#" + task; }
};

struct Decoding {
  int max_new_tokens = 256;
  double temperature = 0.0;
  std::vector<std::string> stop;
};

struct GenerationRequest {
  ChatPayload payload;
  Decoding decoding;
  std::chrono::milliseconds timeout{60000};
  RequestTag tag;

  void validate() const {
    if (decoding.max_new_tokens <= 0)
      throw BackendError(BackendErrorKind::kInvalidRequest, "max_new_tokens must be positive");
    if (decoding.temperature < 0.0)
      throw BackendError(BackendErrorKind::kInvalidRequest, "temperature must be non-negative");
  }
};

struct Usage {
  std::size_t prompt_tokens = 0;
  std::size_t completion_tokens = 0;
};

struct GenerationResult {
  std::string text;
  Usage usage;
  std::chrono::milliseconds latency{0};
  int attempts = 1;
};

class Backend {
 public:
  virtual ~Backend() = default;
  virtual GenerationResult generate(const GenerationRequest& request) = 0;
};

// ---------------------------------------------------------------------------
// Tracing

/// Append-only JSONL log of request/response pairs. Thread-safe.
class TraceLog {
 public:
  explicit TraceLog(std::filesystem::path path) : path_(std::move(path)) {
    if (path_.has_parent_path()) std::filesystem::create_directories(path_.parent_path());
  }

  void record(const GenerationRequest& req, const GenerationResult* result, const std::string& error = {}) {
    Json j;
    j["dialogue_id"] = req.tag.dialogue_id;
    j["turn"] = req.tag.turn;
    j["task"] = req.tag.task;
    j["messages"] = payload_to_json(req.payload);
    if (result) {
      j["text"] = result->text;
      j["attempts"] = result->attempts;
      j["latency_ms"] = result->latency.count();
    } else {
      j["error"] = error;
    }
    const std::string line = io::dump(j) + "\n";
    std::lock_guard lock(mu_);
    std::ofstream out(path_, std::ios::app | std::ios::binary);
    out << line;
    out.flush();
  }

 private:
  std::filesystem::path path_;
  std::mutex mu_;
};

/// Wraps any backend and traces every call.
class TracingBackend : public Backend {
 public:
  TracingBackend(Backend& inner, std::shared_ptr<TraceLog> log) : inner_(inner), log_(std::move(log)) {}

  GenerationResult generate(const GenerationRequest& request) override {
    try {
      auto r = inner_.generate(request);
      log_->record(request, &r);
      return r;
    } catch (const std::exception& e) {
      log_->record(request, nullptr, e.what());
      throw;
    }
  }

 private:
  Backend& inner_;
  std::shared_ptr<TraceLog> log_;
};

// ---------------------------------------------------------------------------
// Mock

/// Replays recorded completions keyed by (dialogue id, turn, task). A fixture
/// with dialogue id "*" or turn 0 matches any dialogue or turn.
class MockBackend : public Backend {
 public:
  void add(const std::string& dialogue_id, int turn, const std::string& task, std::string text) {
    fixtures_[RequestTag{dialogue_id, turn, task}.key()] = std::move(text);
  }

  std::size_t size() const { return fixtures_.size(); }

  /// JSONL lines: {"dialogue_id": str, "turn": int, "task": str, "text": str}.
  static MockBackend load_fixtures(const std::filesystem::path& path) {
    MockBackend m;
    std::size_t line_no = 0;
    for (const auto& line : text::split_lines(io::read_file(path))) {
      ++line_no;
      if (text::trim_view(line).empty()) continue;
      const Json j = io::parse_json(line, path.string() + ":" + std::to_string(line_no));
      m.add(j.value("dialogue_id", std::string("*")), j.value("turn", 0), j.at("task").get<std::string>(),
            j.at("text").get<std::string>());
    }
    return m;
  }

  GenerationResult generate(const GenerationRequest& request) override {
    request.validate();
    const auto& t = request.tag;
    for (const auto& key : {t.key(), RequestTag{t.dialogue_id, 0, t.task}.key(), RequestTag{"*", t.turn, t.task}.key(),
                            RequestTag{"*", 0, t.task}.key()}) {
      if (const auto it = fixtures_.find(key); it != fixtures_.end()) {
        GenerationResult r;
        r.text = it->second;
        r.usage.prompt_tokens = payload_tokens(request.payload);
        r.usage.completion_tokens = estimate_tokens(r.text);
        return r;
      }
    }
    throw BackendError(BackendErrorKind::kFixtureMiss, "mock fixture miss for " + t.key());
  }

 private:
  std::map<std::string, std::string> fixtures_;
};

/// Test and scripting hook: every call goes to a function.
class CallbackBackend : public Backend {
 public:
  using Fn = std::function<std::string(const GenerationRequest&)>;
  explicit CallbackBackend(Fn fn) : fn_(std::move(fn)) {}

  GenerationResult generate(const GenerationRequest& request) override {
    request.validate();
    GenerationResult r;
    r.text = fn_(request);
    return r;
  }

 private:
  Fn fn_;
};

// ---------------------------------------------------------------------------
// HTTP

inline Json fold_roles(const ChatPayload& payload) {
  Json messages = Json::array();
  for (const auto& m : payload.messages) {
    Json j;
    switch (m.role) {
      case Role::kSystem:
        j["role"] = "system";
        j["content"] = m.content;
        break;
      case Role::kUser:
        j["role"] = "user";
        j["content"] = m.content;
        break;
      case Role::kObservation:
        j["role"] = "user";
        j["content"] = "<|observation|>\n" + m.content;
        break;
      case Role::kDomain:
      case Role::kFunction:
        j["role"] = "assistant";
        j["content"] = "<|" + std::string(to_string(m.role)) + "|>\n" + m.content;
        break;
      case Role::kAssistant:
        j["role"] = "assistant";
        j["content"] = m.content;
        break;
    }
    messages.push_back(std::move(j));
  }
  return messages;
}

struct Endpoint {
  std::string scheme;
  std::string host;
  int port = 80;
  std::string path;  // full path of the chat-completions resource

  std::string origin() const { return scheme + "://" + host + ":" + std::to_string(port); }
};

/// Accepts "http://host[:port][/prefix]"; the chat-completions path is
/// appended ("/v1/chat/completions", or "/chat/completions" after a "/v1" prefix).
inline Endpoint parse_endpoint(std::string_view url) {
  static const std::regex kUrl(R"(^(https?)://([A-Za-z0-9.\-]+|\[[0-9a-fA-F:]+\])(?::([0-9]{1,5}))?(/[^?#]*)?$)");
  std::cmatch m;
  const std::string u(text::trim_view(url));
  if (!std::regex_match(u.c_str(), m, kUrl)) throw ConfigError("invalid endpoint URL: '" + u + "'");
  Endpoint e;
  e.scheme = m[1].str();
#ifndef CPPHTTPLIB_OPENSSL_SUPPORT
  if (e.scheme == "https") throw ConfigError("https endpoints need a build with OpenSSL support: " + u);
#endif
  e.host = m[2].str();
  e.port = m[3].matched ? std::stoi(m[3].str()) : (e.scheme == "https" ? 443 : 80);
  if (e.port <= 0 || e.port > 65535) throw ConfigError("invalid port in endpoint URL: " + u);
  std::string prefix = m[4].matched ? m[4].str() : "";
  while (!prefix.empty() && prefix.back() == '/') prefix.pop_back();
  if (prefix.size() >= 17 && prefix.substr(prefix.size() - 17) == "/chat/completions") e.path = prefix;
  else if (prefix.size() >= 3 && prefix.substr(prefix.size() - 3) == "/v1") e.path = prefix + "/chat/completions";
  else e.path = prefix + "/v1/chat/completions";
  return e;
}

struct RetryPolicy {
  int max_attempts = 4;
  std::chrono::milliseconds initial_backoff{500};
  double multiplier = 2.0;
  std::chrono::milliseconds max_backoff{8000};

  std::chrono::milliseconds delay_before(int attempt) const {  // attempt >= 2
    double d = static_cast<double>(initial_backoff.count());
    for (int i = 2; i < attempt; ++i) d *= multiplier;
    return std::chrono::milliseconds(static_cast<long long>(std::min(d, static_cast<double>(max_backoff.count()))));
  }
};

struct HttpBackendConfig {
  std::string base_url;
  std::string api_key;
  std::string model = "default";
  RetryPolicy retry;
  int max_in_flight = 4;

  /// SPECTOD_API_BASE, SPECTOD_API_KEY and SPECTOD_MODEL fill unset fields.
  void apply_env() {
    if (base_url.empty()) {
      if (const char* v = std::getenv("SPECTOD_API_BASE")) base_url = v;
    }
    if (api_key.empty()) {
      if (const char* v = std::getenv("SPECTOD_API_KEY")) api_key = v;
    }
    if (const char* v = std::getenv("SPECTOD_MODEL"); v && model == "default") model = v;
  }
};

class HttpBackend : public Backend {
 public:
  explicit HttpBackend(HttpBackendConfig config)
      : config_(std::move(config)), endpoint_(parse_endpoint(config_.base_url)) {
    if (config_.retry.max_attempts < 1) throw ConfigError("retry attempts must be at least 1");
    if (config_.max_in_flight < 1) throw ConfigError("max_in_flight must be at least 1");
  }

  const Endpoint& endpoint() const { return endpoint_; }

  GenerationResult generate(const GenerationRequest& request) override {
    request.validate();
    Slot slot(*this);
    const std::string body = request_body(request);
    httplib::Headers headers = {{"X-Request-Id", request.tag.key()}};
    if (!config_.api_key.empty()) headers.emplace("Authorization", "Bearer " + config_.api_key);

    const auto start = std::chrono::steady_clock::now();
    std::optional<BackendError> last;
    for (int attempt = 1; attempt <= config_.retry.max_attempts; ++attempt) {
      if (attempt > 1) std::this_thread::sleep_for(config_.retry.delay_before(attempt));
      httplib::Client client(endpoint_.origin());
      client.set_connection_timeout(request.timeout);
      client.set_read_timeout(request.timeout);
      client.set_write_timeout(request.timeout);
      auto res = client.Post(endpoint_.path, headers, body, "application/json");
      if (!res) {
        const auto err = res.error();
        const bool timeout = err == httplib::Error::ConnectionTimeout || err == httplib::Error::Read ||
                             err == httplib::Error::Write;
        last = BackendError(timeout ? BackendErrorKind::kTimeout : BackendErrorKind::kTransport,
                            "request to " + endpoint_.origin() + endpoint_.path + " failed: " + httplib::to_string(err),
                            0, attempt);
        continue;
      }
      if (res->status >= 200 && res->status < 300) {
        GenerationResult r = parse_response(res->body, attempt);
        r.latency = std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - start);
        return r;
      }
      BackendError e(BackendErrorKind::kHttpStatus,
                     "HTTP " + std::to_string(res->status) + " from " + endpoint_.path + ": " + res->body.substr(0, 200),
                     res->status, attempt);
      if (res->status < 500) throw e;  // 4xx and redirects are final
      last = e;
    }
    throw BackendError(last->kind(), last->what() + std::string(" (after ") +
                                         std::to_string(config_.retry.max_attempts) + " attempts)",
                       last->status(), config_.retry.max_attempts);
  }

  std::string request_body(const GenerationRequest& request) const {
    Json j;
    j["model"] = config_.model;
    j["messages"] = fold_roles(request.payload);
    j["temperature"] = request.decoding.temperature;
    j["max_tokens"] = request.decoding.max_new_tokens;
    if (!request.decoding.stop.empty()) j["stop"] = request.decoding.stop;
    j["stream"] = false;
    return io::dump(j);
  }

  static GenerationResult parse_response(const std::string& body, int attempts) {
    GenerationResult r;
    r.attempts = attempts;
    try {
      const Json j = Json::parse(body);
      const Json& content = j.at("choices").at(0).at("message").at("content");
      if (!content.is_string()) throw BackendError(BackendErrorKind::kMalformedResponse, "completion content is not a string");
      r.text = content.get<std::string>();
      if (j.contains("usage") && j["usage"].is_object()) {
        r.usage.prompt_tokens = j["usage"].value("prompt_tokens", std::size_t{0});
        r.usage.completion_tokens = j["usage"].value("completion_tokens", std::size_t{0});
      }
    } catch (const nlohmann::json::exception& e) {
      throw BackendError(BackendErrorKind::kMalformedResponse, std::string("malformed completion body: ") + e.what(), 0,
                         attempts);
    }
    return r;
  }

 private:
  /// Bounds concurrent in-flight requests.
  class Slot {
   public:
    explicit Slot(HttpBackend& b) : b_(b) {
      std::unique_lock lock(b_.mu_);
      b_.cv_.wait(lock, [&] { return b_.in_flight_ < b_.config_.max_in_flight; });
      ++b_.in_flight_;
    }
    ~Slot() {
      {
        std::lock_guard lock(b_.mu_);
        --b_.in_flight_;
      }
      b_.cv_.notify_one();
    }

   private:
    HttpBackend& b_;
  };

  HttpBackendConfig config_;
  Endpoint endpoint_;
  std::mutex mu_;
  std::condition_variable cv_;
  int in_flight_ = 0;
};

// ---------------------------------------------------------------------------
// Judge

struct JudgeExchange {
  std::string context;
  std::string response;
};

/// First number in the completion, preferring one that follows "score".
/// Missing or out-of-range numbers are an error, never a default.
inline double parse_judge_score(std::string_view completion) {
  static const std::regex kAfterScore(R"([Ss]core\s*[:=]?\s*([0-9]+(?:\.[0-9]+)?))");
  static const std::regex kAnyNumber(R"(([0-9]+(?:\.[0-9]+)?))");
  const std::string s(completion);
  std::smatch m;
  if (!std::regex_search(s, m, kAfterScore) && !std::regex_search(s, m, kAnyNumber))
    throw ParseError("judge completion has no score: '" + s.substr(0, 80) + "'");
  const double v = std::stod(m[1].str());
  if (v < 0.0 || v > 5.0) throw ParseError("judge score " + m[1].str() + " outside [0, 5]");
  return v;
}

inline ChatPayload judge_payload(std::string_view question, const JudgeExchange& exchange) {
  ChatPayload p;
  p.messages.push_back({Role::kSystem,
                        "You grade responses of a task-oriented dialogue system.\nCriterion: " + std::string(question) +
                            "\nRate the response from 0 (worst) to 5 (best) and reply with a single line 'Score: <number>'."});
  p.messages.push_back({Role::kUser, "Conversation:\n" + exchange.context + "\n\nResponse:\n" + exchange.response});
  return p;
}

inline double judge(Backend& backend, std::string_view criterion, std::string_view question,
                    const JudgeExchange& exchange, RequestTag tag = {}) {
  GenerationRequest req;
  req.payload = judge_payload(question, exchange);
  req.decoding.max_new_tokens = 16;
  tag.task = "JUDGE:" + std::string(criterion);
  req.tag = std::move(tag);
  return parse_judge_score(backend.generate(req).text);
}

}  // namespace spectod
