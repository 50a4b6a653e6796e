#pragma once

// Completion endpoints for the trace generator and the reviser: an
// OpenAI-compatible HTTP backend and a deterministic mock for tests and
// offline runs.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <semaphore>
#include <string>
#include <thread>
#include <vector>

#include "httplib.h"
#include "json.hpp"
#include "revisebench/error.hpp"
#include "revisebench/numeric.hpp"
#include "revisebench/prompt_io.hpp"

namespace revisebench {

enum class BackendKind { http, mock };

inline std::string_view to_string(BackendKind b) { return b == BackendKind::http ? "http" : "mock"; }

inline BackendKind parse_backend(std::string_view s) {
  if (s == "http") return BackendKind::http;
  if (s == "mock") return BackendKind::mock;
  throw ConfigError("unknown backend '" + std::string(s) + "'");
}

enum class MockProfileKind { always_prior, perturb_prior, oracle_blend, garbage };

inline std::string_view to_string(MockProfileKind k) {
  switch (k) {
    case MockProfileKind::always_prior: return "always_prior";
    case MockProfileKind::perturb_prior: return "perturb_prior";
    case MockProfileKind::oracle_blend: return "oracle_blend";
    case MockProfileKind::garbage: return "garbage";
  }
  return "always_prior";
}

inline MockProfileKind parse_mock_profile(std::string_view s) {
  for (auto k : {MockProfileKind::always_prior, MockProfileKind::perturb_prior, MockProfileKind::oracle_blend,
                 MockProfileKind::garbage}) {
    if (to_string(k) == s) return k;
  }
  throw ConfigError("unknown mock profile '" + std::string(s) + "'");
}

/// Behaviour of the mock backend.
///  always_prior:  emits the initial forecast verbatim
///  perturb_prior: prior * (1 + sigma * eps_t), eps_t standard normal
///  oracle_blend:  beta * truth + (1 - beta) * prior (needs a truth oracle)
///  garbage:       malformed text with probability q, always_prior otherwise
struct MockProfile {
  MockProfileKind kind = MockProfileKind::always_prior;
  double sigma = 0.05;
  double beta = 0.5;
  double q = 1.0;

  void validate() const {
    if (!(sigma >= 0.0)) throw ConfigError("mock profile: sigma must be >= 0");
    if (!(beta >= 0.0 && beta <= 1.0)) throw ConfigError("mock profile: beta must lie in [0, 1]");
    if (!(q >= 0.0 && q <= 1.0)) throw ConfigError("mock profile: q must lie in [0, 1]");
  }
};

struct LlmEndpoint {
  BackendKind backend = BackendKind::mock;
  std::string model_name = "mock";
  double temperature = 0.9;
  double top_p = 0.9;
  int max_output_tokens = 1024;
  int timeout_ms = 60000;
  int max_retries = 3;
  std::optional<std::uint64_t> seed;  // mock only

  // http
  std::string base_url;
  std::string path = "/v1/chat/completions";
  std::string api_key_env = "REVISEBENCH_API_KEY";
  std::map<std::string, std::string> headers{{"Authorization", "Bearer {api_key}"}};
  int backoff_base_ms = 500;
  int backoff_cap_ms = 30000;

  int max_in_flight = 8;
  MockProfile profile;

  void validate() const {
    if (!(temperature >= 0.0 && temperature <= 2.0)) throw ConfigError("endpoint: temperature must lie in [0, 2]");
    if (!(top_p > 0.0 && top_p <= 1.0)) throw ConfigError("endpoint: top_p must lie in (0, 1]");
    if (max_output_tokens < 1 || timeout_ms < 1 || max_retries < 0 || max_in_flight < 1) {
      throw ConfigError("endpoint: token, timeout, retry and concurrency limits must be positive");
    }
    if (backend == BackendKind::http) {
      if (base_url.empty()) throw ConfigError("http endpoint requires base_url");
      if (api_key_env.empty()) throw ConfigError("http endpoint requires api_key_env");
    } else {
      if (!seed) throw ConfigError("mock endpoint requires a seed");
      profile.validate();
    }
  }

  /// Stable identity of everything that changes sampled outputs.
  std::string fingerprint() const {
    std::string s = std::string(to_string(backend)) + "|" + model_name + "|" + format_number(temperature) + "|" +
                    format_number(top_p) + "|" + std::to_string(max_output_tokens);
    if (backend == BackendKind::mock) {
      s += "|" + std::string(to_string(profile.kind)) + "|" + format_number(profile.sigma) + "|" +
           format_number(profile.beta) + "|" + format_number(profile.q) + "|" + std::to_string(seed.value_or(0));
    } else {
      s += "|" + base_url + path;
    }
    return hex64(fnv1a(s));
  }
};

struct CompletionRequest {
  std::string prompt;
  int n_samples = 1;
  /// Caller-side label (the instance id). Never sent to an http endpoint;
  /// the mock uses it to look up the truth for oracle_blend.
  std::string tag;
};

struct Usage {
  std::int64_t input_tokens = 0;
  std::int64_t output_tokens = 0;
};

struct CompletionResult {
  std::vector<std::string> samples;
  Usage usage;
  std::int64_t latency_ms = 0;
  int attempt_count = 0;
};

/// Word count * 1.3, rounded.
inline std::int64_t approx_tokens(std::string_view text) {
  return std::llround(static_cast<double>(word_count(text)) * 1.3);
}

class CompletionBackend {
 public:
  virtual ~CompletionBackend() = default;
  virtual CompletionResult complete(const CompletionRequest& request) = 0;
};

using TruthOracle = std::function<std::optional<std::vector<double>>(const std::string& tag)>;

// ---------------------------------------------------------------------------
// Mock backend

class MockBackend final : public CompletionBackend {
 public:
  MockBackend(MockProfile profile, std::uint64_t seed, TruthOracle truth = {})
      : profile_(profile), seed_(seed), truth_(std::move(truth)) {
    profile_.validate();
  }

  CompletionResult complete(const CompletionRequest& request) override {
    const auto start = std::chrono::steady_clock::now();
    const PromptView view = read_prompt(request.prompt);
    std::optional<std::vector<double>> truth;
    if (profile_.kind == MockProfileKind::oracle_blend) {
      if (truth_) truth = truth_(request.tag);
      if (!truth) throw ConfigError("mock oracle_blend requires ground truth for '" + request.tag + "'");
      if (truth->size() != view.requested.size()) {
        throw ConfigError("mock oracle_blend: truth length differs from requested horizon");
      }
    }
    CompletionResult res;
    const auto prompt_hash = fnv1a(request.prompt);
    for (int j = 0; j < request.n_samples; ++j) {
      Rng rng(mix_seed(mix_seed(seed_, prompt_hash), static_cast<std::uint64_t>(j)));
      res.samples.push_back(sample(view, truth, rng));
      res.usage.output_tokens += approx_tokens(res.samples.back());
    }
    res.usage.input_tokens = approx_tokens(request.prompt) * request.n_samples;
    res.attempt_count = 1;
    res.latency_ms = std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - start)
                         .count();
    return res;
  }

 private:
  struct PromptView {
    std::vector<Date> requested;
    std::vector<double> base;
    bool has_prior = false;
  };

  static PromptView read_prompt(std::string_view prompt) {
    PromptView v;
    // Requested timestamps: one per line after the header, up to a blank line.
    const std::string_view header = "Requested timestamps:\n";
    if (auto pos = prompt.rfind(header); pos != std::string_view::npos) {
      pos += header.size();
      while (pos < prompt.size()) {
        auto nl = prompt.find('\n', pos);
        if (nl == std::string_view::npos) nl = prompt.size();
        const auto line = detail::trim(prompt.substr(pos, nl - pos));
        pos = nl + 1;
        if (line.empty()) break;
        if (auto d = try_parse_date(line)) v.requested.push_back(*d);
      }
    }
    auto read_values = [](std::string_view block) {
      std::vector<double> vals;
      std::size_t pos = 0;
      while (pos < block.size()) {
        auto nl = block.find('\n', pos);
        if (nl == std::string_view::npos) nl = block.size();
        if (auto p = detail::parse_point_line(block.substr(pos, nl - pos))) vals.push_back(p->value);
        pos = nl + 1;
      }
      return vals;
    };
    if (auto init = detail::last_block(prompt, "initial_forecast")) {
      v.base = read_values(*init);
      v.has_prior = true;
    } else if (auto hist = detail::last_block(prompt, "history")) {
      const auto vals = read_values(*hist);
      v.base.assign(v.requested.size(), vals.empty() ? 0.0 : vals.back());
    }
    v.base.resize(v.requested.size(), v.base.empty() ? 0.0 : v.base.back());
    return v;
  }

  std::string sample(const PromptView& view, const std::optional<std::vector<double>>& truth, Rng& rng) const {
    const std::size_t H = view.requested.size();
    if (profile_.kind == MockProfileKind::garbage && rng.uniform() < profile_.q) return garbage(view, rng);

    std::vector<double> values = view.base;
    std::string analysis;
    switch (profile_.kind) {
      case MockProfileKind::always_prior:
      case MockProfileKind::garbage:
        analysis = "- The context gives no reliable signal for a change.\n- I keep the initial forecast unchanged.";
        break;
      case MockProfileKind::perturb_prior:
        for (auto& x : values) x *= 1.0 + profile_.sigma * rng.normal();
        analysis = "- Recent context suggests modest movement around the initial forecast.\n"
                   "- I adjust each timestamp slightly.";
        break;
      case MockProfileKind::oracle_blend:
        for (std::size_t t = 0; t < H; ++t) values[t] = profile_.beta * (*truth)[t] + (1.0 - profile_.beta) * view.base[t];
        analysis = "- The context points to a shift relative to the initial forecast.\n"
                   "- I move the forecast toward the level implied by the drivers.";
        break;
    }
    if (!view.has_prior) analysis = "- Extrapolating from the recent history and the context.";
    return serialize_response(analysis, view.requested, values).text;
  }

  static std::string garbage(const PromptView& view, Rng& rng) {
    const std::size_t H = view.requested.size();
    switch (rng.below(4)) {
      case 0: {  // unterminated block
        std::string s = "<analysis>\nThinking about it.\n</analysis>\n<forecast>\n";
        for (std::size_t t = 0; t < H; ++t) s += format_point(view.requested[t], view.base[t]) + "\n";
        return s;
      }
      case 1:
        return "I am not able to produce a forecast for this series.";
      case 2: {  // one point short
        std::string s = "<forecast>\n";
        for (std::size_t t = 0; t + 1 < H; ++t) s += format_point(view.requested[t], view.base[t]) + "\n";
        return s + "</forecast>";
      }
      default: {
        std::string s = "<forecast>\n";
        for (std::size_t t = 0; t < H; ++t) s += "(" + view.requested[t].timestamp() + ", n/a)\n";
        return s + "</forecast>";
      }
    }
  }

  MockProfile profile_;
  std::uint64_t seed_;
  TruthOracle truth_;
};

// ---------------------------------------------------------------------------
// HTTP backend

class HttpBackend final : public CompletionBackend {
 public:
  explicit HttpBackend(LlmEndpoint endpoint) : ep_(std::move(endpoint)) {
    bool needs_key = false;
    for (const auto& [k, v] : ep_.headers) needs_key |= v.find("{api_key}") != std::string::npos;
    if (needs_key) {
      const char* key = std::getenv(ep_.api_key_env.c_str());
      if (!key || !*key) throw ConfigError("credential missing: environment variable " + ep_.api_key_env + " is not set");
      api_key_ = key;
    }
  }

  CompletionResult complete(const CompletionRequest& request) override {
    const auto start = std::chrono::steady_clock::now();
    CompletionResult res;
    bool usage_reported = false;
    while (static_cast<int>(res.samples.size()) < request.n_samples) {
      const int want = request.n_samples - static_cast<int>(res.samples.size());
      const std::string body = post_with_retries(make_body(request.prompt, want), res.attempt_count);
      const auto before = res.samples.size();
      usage_reported |= decode(body, res);
      if (res.samples.size() == before) throw TransportError("endpoint returned no completions");
    }
    res.samples.resize(static_cast<std::size_t>(request.n_samples));
    if (!usage_reported) {
      res.usage.input_tokens = approx_tokens(request.prompt) * request.n_samples;
      for (const auto& s : res.samples) res.usage.output_tokens += approx_tokens(s);
    }
    res.latency_ms = std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - start)
                         .count();
    return res;
  }

 private:
  std::string make_body(const std::string& prompt, int n) const {
    return nlohmann::json{{"model", ep_.model_name},
                          {"messages", nlohmann::json::array({{{"role", "user"}, {"content", prompt}}})},
                          {"temperature", ep_.temperature},
                          {"top_p", ep_.top_p},
                          {"n", n},
                          {"max_tokens", ep_.max_output_tokens}}
        .dump();
  }

  /// Returns true when the provider reported token usage.
  static bool decode(const std::string& body, CompletionResult& res) {
    const auto j = nlohmann::json::parse(body, nullptr, false);
    if (j.is_discarded() || !j.is_object() || !j.contains("choices")) {
      res.samples.push_back(body);
      return false;
    }
    for (const auto& c : j["choices"]) {
      if (c.contains("message") && c["message"].contains("content") && c["message"]["content"].is_string()) {
        res.samples.push_back(c["message"]["content"].get<std::string>());
      } else if (c.contains("text") && c["text"].is_string()) {
        res.samples.push_back(c["text"].get<std::string>());
      }
    }
    if (j.contains("usage") && j["usage"].is_object()) {
      res.usage.input_tokens += j["usage"].value("prompt_tokens", std::int64_t{0});
      res.usage.output_tokens += j["usage"].value("completion_tokens", std::int64_t{0});
      return true;
    }
    return false;
  }

  std::string post_with_retries(const std::string& body, int& attempts) {
    httplib::Headers headers;
    for (const auto& [k, v] : ep_.headers) {
      std::string value = v;
      if (auto p = value.find("{api_key}"); p != std::string::npos) value.replace(p, 9, api_key_);
      headers.emplace(k, value);
    }
    std::string last_error;
    for (int attempt = 0; attempt <= ep_.max_retries; ++attempt) {
      if (attempt > 0) backoff(attempt);
      ++attempts;
      httplib::Client cli(ep_.base_url);
      const auto secs = ep_.timeout_ms / 1000;
      const auto usecs = (ep_.timeout_ms % 1000) * 1000;
      cli.set_connection_timeout(secs, usecs);
      cli.set_read_timeout(secs, usecs);
      cli.set_write_timeout(secs, usecs);
      auto r = cli.Post(ep_.path, headers, body, "application/json");
      if (!r) {
        last_error = "request failed: " + httplib::to_string(r.error());
        continue;
      }
      if (r->status >= 200 && r->status < 300) return r->body;
      last_error = "HTTP " + std::to_string(r->status);
      const bool transient = r->status == 408 || r->status == 429 || r->status >= 500;
      if (!transient) throw TransportError(last_error + ": " + r->body.substr(0, 200));
    }
    throw TransportError("retries exhausted after " + std::to_string(ep_.max_retries + 1) + " attempts (" + last_error + ")");
  }

  void backoff(int attempt) {
    const double base = static_cast<double>(ep_.backoff_base_ms) * std::pow(2.0, attempt - 1);
    const double capped = std::min(base, static_cast<double>(ep_.backoff_cap_ms));
    thread_local Rng jitter(mix_seed(
        static_cast<std::uint64_t>(std::chrono::steady_clock::now().time_since_epoch().count()),
        std::hash<std::thread::id>{}(std::this_thread::get_id())));
    const auto ms = static_cast<std::int64_t>(capped * (0.5 + 0.5 * jitter.uniform()));
    std::this_thread::sleep_for(std::chrono::milliseconds(ms));
  }

  LlmEndpoint ep_;
  std::string api_key_;
};

// ---------------------------------------------------------------------------

/// Shareable endpoint handle. Bounds the number of in-flight requests.
class LlmClient {
 public:
  LlmClient(LlmEndpoint endpoint, std::unique_ptr<CompletionBackend> backend)
      : endpoint_(std::move(endpoint)), backend_(std::move(backend)), in_flight_(endpoint_.max_in_flight) {}

  CompletionResult complete(const CompletionRequest& request) {
    if (request.prompt.empty()) throw ValidationError("complete: empty prompt");
    if (request.n_samples < 1) throw ValidationError("complete: n_samples must be >= 1");
    in_flight_.acquire();
    struct Release {
      std::counting_semaphore<>& s;
      ~Release() { s.release(); }
    } guard{in_flight_};
    return backend_->complete(request);
  }

  const LlmEndpoint& endpoint() const { return endpoint_; }

 private:
  LlmEndpoint endpoint_;
  std::unique_ptr<CompletionBackend> backend_;
  std::counting_semaphore<> in_flight_;
};

inline std::unique_ptr<LlmClient> make_client(const LlmEndpoint& endpoint, TruthOracle truth = {}) {
  endpoint.validate();
  std::unique_ptr<CompletionBackend> backend;
  if (endpoint.backend == BackendKind::mock) {
    backend = std::make_unique<MockBackend>(endpoint.profile, *endpoint.seed, std::move(truth));
  } else {
    backend = std::make_unique<HttpBackend>(endpoint);
  }
  return std::make_unique<LlmClient>(endpoint, std::move(backend));
}

}  // namespace revisebench
