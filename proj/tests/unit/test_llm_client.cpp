#include <gtest/gtest.h>

#include <atomic>
#include <cstdlib>
#include <thread>

#include "builders.hpp"
#include "httplib.h"
#include "revisebench/llm_client.hpp"
#include "revisebench/metrics.hpp"
#include "revisebench/parallel.hpp"

using namespace revisebench;
using revisebench::test_support::make_instance;

namespace {

ForecastInstance instance() {
  return make_instance({10, 12, 11, 13, 12, 14, 13, 15}, std::vector<double>{20, 21, 22, 23},
                       std::vector<double>{14, 15, 14, 16});
}

LlmEndpoint mock(MockProfileKind kind, double beta = 0.5, double q = 1.0) {
  LlmEndpoint e;
  e.backend = BackendKind::mock;
  e.seed = 123;
  e.profile.kind = kind;
  e.profile.beta = beta;
  e.profile.q = q;
  return e;
}

TruthOracle oracle_for(const ForecastInstance& inst) {
  return [inst](const std::string& id) -> std::optional<std::vector<double>> {
    if (id == inst.instance_id) return inst.ground_truth;
    return std::nullopt;
  };
}

std::vector<ParsedOutput> sample(const LlmEndpoint& ep, const ForecastInstance& inst, int n = 5,
                                 PromptMode mode = PromptMode::revise) {
  auto client = make_client(ep, oracle_for(inst));
  const auto res = client->complete({render_prompt(inst, mode).text, n, inst.instance_id});
  EXPECT_EQ(res.samples.size(), static_cast<std::size_t>(n));
  std::vector<ParsedOutput> out;
  for (const auto& s : res.samples) out.push_back(parse_output(s, inst.horizon_timestamps));
  return out;
}

/// Local stub endpoint on an ephemeral port.
class Stub {
 public:
  explicit Stub(std::function<void(const httplib::Request&, httplib::Response&)> handler) {
    server_.Post("/v1/chat/completions", [this, handler](const httplib::Request& req, httplib::Response& res) {
      ++hits;
      last_auth = req.get_header_value("Authorization");
      last_body = req.body;
      handler(req, res);
    });
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  ~Stub() {
    server_.stop();
    thread_.join();
  }

  LlmEndpoint endpoint() const {
    LlmEndpoint e;
    e.backend = BackendKind::http;
    e.base_url = "http://127.0.0.1:" + std::to_string(port_);
    e.api_key_env = "REVISEBENCH_TEST_KEY";
    e.backoff_base_ms = 1;
    e.backoff_cap_ms = 5;
    e.max_retries = 3;
    e.timeout_ms = 5000;
    return e;
  }

  std::atomic<int> hits{0};
  std::string last_auth;
  std::string last_body;

 private:
  httplib::Server server_;
  int port_ = 0;
  std::thread thread_;
};

struct KeyEnv {
  KeyEnv() { setenv("REVISEBENCH_TEST_KEY", "secret-token", 1); }
  ~KeyEnv() { unsetenv("REVISEBENCH_TEST_KEY"); }
};

}  // namespace

TEST(Mock, DeterministicAcrossClients) {
  const auto inst = instance();
  const auto prompt = render_prompt(inst, PromptMode::revise).text;
  auto ep = mock(MockProfileKind::perturb_prior);
  const auto a = make_client(ep)->complete({prompt, 5, inst.instance_id});
  const auto b = make_client(ep)->complete({prompt, 5, inst.instance_id});
  EXPECT_EQ(a.samples, b.samples);
  EXPECT_NE(a.samples[0], a.samples[1]);
  ep.seed = 124;
  EXPECT_NE(make_client(ep)->complete({prompt, 5, inst.instance_id}).samples, a.samples);
  EXPECT_GT(a.usage.input_tokens, 0);
  EXPECT_GT(a.usage.output_tokens, 0);
  EXPECT_EQ(a.attempt_count, 1);
}

TEST(Mock, AlwaysPriorEchoesPrior) {
  const auto inst = instance();
  for (const auto& p : sample(mock(MockProfileKind::always_prior), inst)) {
    ASSERT_EQ(p.parse_status, ParseStatus::ok);
    EXPECT_TRUE(p.analysis.has_value());
    EXPECT_EQ(p.values(), *inst.prior);
  }
}

TEST(Mock, OracleBlendEndpoints) {
  const auto inst = instance();
  for (const auto& p : sample(mock(MockProfileKind::oracle_blend, 1.0), inst)) {
    EXPECT_EQ(mean_absolute_error(p.values(), *inst.ground_truth), 0.0);
  }
  for (const auto& p : sample(mock(MockProfileKind::oracle_blend, 0.0), inst)) {
    EXPECT_TRUE(detect_fallback(p, *inst.prior));
  }
  const double prior_mae = mean_absolute_error(*inst.prior, *inst.ground_truth);
  for (const auto& p : sample(mock(MockProfileKind::oracle_blend, 0.5), inst)) {
    EXPECT_NEAR(mean_absolute_error(p.values(), *inst.ground_truth), 0.5 * prior_mae, 1e-12);
  }
}

TEST(Mock, OracleBlendNeedsTruth) {
  const auto inst = instance();
  auto client = make_client(mock(MockProfileKind::oracle_blend));
  EXPECT_THROW(client->complete({render_prompt(inst, PromptMode::revise).text, 1, inst.instance_id}), ConfigError);
}

TEST(Mock, GarbageNeverParses) {
  const auto inst = instance();
  for (const auto& p : sample(mock(MockProfileKind::garbage, 0.5, 1.0), inst, 40)) {
    EXPECT_NE(p.parse_status, ParseStatus::ok);
    EXPECT_FALSE(p.valid_window);
  }
  int ok = 0;
  for (const auto& p : sample(mock(MockProfileKind::garbage, 0.5, 0.5), inst, 200)) ok += p.valid_window;
  EXPECT_GT(ok, 60);
  EXPECT_LT(ok, 140);
}

TEST(Mock, DirectPromptExtrapolatesHistory) {
  const auto inst = instance();
  for (const auto& p : sample(mock(MockProfileKind::always_prior), inst, 2, PromptMode::direct)) {
    ASSERT_TRUE(p.valid_window);
    EXPECT_EQ(p.values(), std::vector<double>(4, 15.0));
  }
}

TEST(Endpoint, Validation) {
  LlmEndpoint e;
  EXPECT_THROW(e.validate(), ConfigError);  // mock without seed
  e.seed = 1;
  EXPECT_NO_THROW(e.validate());
  e.temperature = 2.5;
  EXPECT_THROW(e.validate(), ConfigError);
  e.temperature = 0.9;
  e.profile.beta = 1.5;
  EXPECT_THROW(e.validate(), ConfigError);
  LlmEndpoint h;
  h.backend = BackendKind::http;
  EXPECT_THROW(h.validate(), ConfigError);  // no base_url
  EXPECT_NE(mock(MockProfileKind::garbage).fingerprint(), mock(MockProfileKind::always_prior).fingerprint());
}

TEST(Client, RejectsBadRequests) {
  auto client = make_client(mock(MockProfileKind::always_prior));
  EXPECT_THROW(client->complete({"", 1, "x"}), ValidationError);
  EXPECT_THROW(client->complete({"p", 0, "x"}), ValidationError);
}

TEST(Client, BoundsInFlightRequests) {
  struct Slow final : CompletionBackend {
    std::atomic<int> now{0}, peak{0};
    CompletionResult complete(const CompletionRequest&) override {
      const int n = ++now;
      int p = peak.load();
      while (n > p && !peak.compare_exchange_weak(p, n)) {
      }
      std::this_thread::sleep_for(std::chrono::milliseconds(5));
      --now;
      return {{"x"}, {}, 0, 1};
    }
  };
  auto backend = std::make_unique<Slow>();
  auto* raw = backend.get();
  LlmEndpoint ep = mock(MockProfileKind::always_prior);
  ep.max_in_flight = 2;
  LlmClient client(ep, std::move(backend));
  parallel_for(40, 8, [&](std::size_t) { client.complete({"p", 1, "x"}); });
  EXPECT_LE(raw->peak.load(), 2);
  EXPECT_GE(raw->peak.load(), 1);
}

TEST(Http, FixedBodyRoundTrip) {
  KeyEnv key;
  Stub stub([](const httplib::Request&, httplib::Response& res) { res.set_content("plain answer", "text/plain"); });
  auto client = make_client(stub.endpoint());
  const auto r = client->complete({"hello", 1, "id"});
  ASSERT_EQ(r.samples.size(), 1u);
  EXPECT_EQ(r.samples[0], "plain answer");
  EXPECT_EQ(r.attempt_count, 1);
  EXPECT_EQ(stub.last_auth, "Bearer secret-token");
  const auto body = json::parse(stub.last_body);
  EXPECT_EQ(body["messages"][0]["content"], "hello");
  EXPECT_FALSE(body.contains("tag"));
  EXPECT_EQ(stub.last_body.find("\"id\""), std::string::npos);
}

TEST(Http, DecodesChoicesAndLoopsUntilN) {
  KeyEnv key;
  Stub stub([](const httplib::Request&, httplib::Response& res) {
    res.set_content(R"({"choices":[{"message":{"content":"a"}},{"message":{"content":"b"}}],
                        "usage":{"prompt_tokens":7,"completion_tokens":3}})",
                    "application/json");
  });
  const auto r = make_client(stub.endpoint())->complete({"hello", 3, "id"});
  EXPECT_EQ(r.samples, (std::vector<std::string>{"a", "b", "a"}));
  EXPECT_EQ(stub.hits.load(), 2);
  EXPECT_EQ(r.usage.input_tokens, 14);
}

TEST(Http, RetriesTransientFailures) {
  KeyEnv key;
  std::atomic<int> calls{0};
  Stub stub([&](const httplib::Request&, httplib::Response& res) {
    if (++calls <= 2) {
      res.status = calls == 1 ? 429 : 503;
      return;
    }
    res.set_content("ok", "text/plain");
  });
  const auto r = make_client(stub.endpoint())->complete({"hello", 1, "id"});
  EXPECT_EQ(r.samples[0], "ok");
  EXPECT_EQ(r.attempt_count, 3);
}

TEST(Http, ExhaustedRetriesSurfaceTransportError) {
  KeyEnv key;
  Stub stub([](const httplib::Request&, httplib::Response& res) { res.status = 500; });
  auto ep = stub.endpoint();
  ep.max_retries = 2;
  EXPECT_THROW(make_client(ep)->complete({"hello", 1, "id"}), TransportError);
  EXPECT_EQ(stub.hits.load(), 3);
}

TEST(Http, ClientErrorsAreNotRetried) {
  KeyEnv key;
  Stub stub([](const httplib::Request&, httplib::Response& res) { res.status = 400; });
  EXPECT_THROW(make_client(stub.endpoint())->complete({"hello", 1, "id"}), TransportError);
  EXPECT_EQ(stub.hits.load(), 1);
}

TEST(Http, UnreachableEndpointRetriesThenFails) {
  KeyEnv key;
  LlmEndpoint e;
  e.backend = BackendKind::http;
  e.base_url = "http://127.0.0.1:1";
  e.api_key_env = "REVISEBENCH_TEST_KEY";
  e.max_retries = 1;
  e.backoff_base_ms = 1;
  e.timeout_ms = 500;
  EXPECT_THROW(make_client(e)->complete({"hello", 1, "id"}), TransportError);
}

TEST(Http, MissingCredentialIsConfigError) {
  unsetenv("REVISEBENCH_TEST_KEY");
  LlmEndpoint e;
  e.backend = BackendKind::http;
  e.base_url = "http://127.0.0.1:1";
  e.api_key_env = "REVISEBENCH_TEST_KEY";
  EXPECT_THROW(make_client(e), ConfigError);
}
