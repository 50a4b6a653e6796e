#pragma once

// Pipeline stages behind the command-line tool. Every stage reads the shared
// configuration, writes under <output_dir>/<stage>/ and leaves a manifest.

#include <chrono>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "revisebench/core_data.hpp"
#include "revisebench/eval_analytics.hpp"
#include "revisebench/llm_client.hpp"
#include "revisebench/metrics.hpp"
#include "revisebench/prompt_io.hpp"
#include "revisebench/reward_engine.hpp"
#include "revisebench/trace_pipeline.hpp"

#ifndef REVISEBENCH_VERSION
#define REVISEBENCH_VERSION "0.0.0"
#endif

namespace revisebench {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Structured logging

/// One JSON object per line on the given stream.
class Logger {
 public:
  explicit Logger(std::ostream* out = &std::cerr) : out_(out) {}

  void event(std::string_view level, std::string_view name, json fields = json::object()) const {
    if (!out_) return;
    json line{{"ts", now_iso()}, {"level", level}, {"event", name}};
    for (auto& [k, v] : fields.items()) line[k] = v;
    std::lock_guard lock(mu_);
    *out_ << line.dump() << '\n';
  }
  void info(std::string_view name, json fields = json::object()) const { event("info", name, std::move(fields)); }
  void warn(std::string_view name, json fields = json::object()) const { event("warn", name, std::move(fields)); }

  static std::string now_iso() {
    const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
  }

 private:
  std::ostream* out_;
  mutable std::mutex mu_;
};

// ---------------------------------------------------------------------------
// Configuration

struct PriorSource {
  std::optional<PriorKind> builtin = PriorKind::seasonal_naive;
  std::string file;  // used when builtin is empty
};

struct MethodSpec {
  std::string id;
  EvalMode mode = EvalMode::prior_only;
  std::string endpoint;  // key into PipelineConfig::endpoints
};

struct PipelineConfig {
  std::string suite_path;
  WindowSpec window;
  SplitAssignment split;
  PriorSource prior;
  SeasonalPeriodMap periods;
  std::map<std::string, LlmEndpoint> endpoints;
  SelectionConfig selection;
  Recipe recipe = Recipe::top3_fallback;
  RewardConfig reward;
  std::size_t collapse_step_size = 20;
  std::vector<MethodSpec> methods;
  ContrastParams simulate;
  std::string output_dir = "out";
  std::string templates_dir;
  std::uint64_t seed = 0;
  std::size_t jobs = 1;
  int repeats = 1;
  int instance_retries = 1;

  json source;  // configuration as read, overrides applied

  void validate() const {
    window.validate();
    split.validate();
    selection.validate();
    reward.validate();
    if (!prior.builtin && prior.file.empty()) throw ConfigError("config: prior needs a builtin kind or a file");
    if (periods.daily_period < 1 || periods.weekly_period < 1) throw ConfigError("config: periods must be >= 1");
    if (collapse_step_size < 1) throw ConfigError("config: collapse_step_size must be >= 1");
    if (jobs < 1) throw ConfigError("config: jobs must be >= 1");
    if (repeats < 1) throw ConfigError("config: repeats must be >= 1");
    std::set<std::string> ids;
    for (const auto& m : methods) {
      if (m.id.empty() || !ids.insert(m.id).second) throw ConfigError("config: method ids must be unique and non-empty");
      if (m.mode != EvalMode::prior_only && !endpoints.count(m.endpoint)) {
        throw ConfigError("config: method '" + m.id + "' references unknown endpoint '" + m.endpoint + "'");
      }
    }
    for (const auto& [name, ep] : endpoints) {
      try {
        ep.validate();
      } catch (const ConfigError& e) {
        throw ConfigError("endpoint '" + name + "': " + e.what());
      }
    }
  }

  const LlmEndpoint& endpoint(const std::string& name) const {
    const auto it = endpoints.find(name);
    if (it == endpoints.end()) throw ConfigError("config: no endpoint named '" + name + "'");
    return it->second;
  }

  fs::path out() const { return fs::path(output_dir); }

  TemplateSet templates() const { return templates_dir.empty() ? TemplateSet{} : TemplateSet::load(templates_dir); }
};

struct Overrides {
  std::optional<std::string> output_dir;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> jobs;
  std::optional<BackendKind> backend;
};

namespace detail {

template <class T>
T get_or(const json& j, const char* key, T fallback) {
  return j.contains(key) && !j[key].is_null() ? j[key].get<T>() : fallback;
}

inline std::string resolve_path(const fs::path& base, const std::string& p) {
  if (p.empty()) return p;
  const fs::path path(p);
  return path.is_absolute() ? p : (base / path).lexically_normal().string();
}

inline LlmEndpoint endpoint_from_json(const json& j, std::uint64_t default_seed) {
  LlmEndpoint e;
  e.backend = parse_backend(get_or<std::string>(j, "backend", "mock"));
  e.model_name = get_or<std::string>(j, "model", e.model_name);
  e.temperature = get_or(j, "temperature", e.temperature);
  e.top_p = get_or(j, "top_p", e.top_p);
  e.max_output_tokens = get_or(j, "max_output_tokens", e.max_output_tokens);
  e.timeout_ms = get_or(j, "timeout_ms", e.timeout_ms);
  e.max_retries = get_or(j, "max_retries", e.max_retries);
  e.base_url = get_or<std::string>(j, "base_url", e.base_url);
  e.path = get_or<std::string>(j, "path", e.path);
  e.api_key_env = get_or<std::string>(j, "api_key_env", e.api_key_env);
  if (j.contains("headers")) e.headers = j["headers"].get<std::map<std::string, std::string>>();
  e.backoff_base_ms = get_or(j, "backoff_base_ms", e.backoff_base_ms);
  e.backoff_cap_ms = get_or(j, "backoff_cap_ms", e.backoff_cap_ms);
  e.max_in_flight = get_or(j, "max_in_flight", e.max_in_flight);
  e.seed = get_or<std::uint64_t>(j, "seed", default_seed);
  if (j.contains("profile")) {
    const auto& p = j["profile"];
    e.profile.kind = parse_mock_profile(get_or<std::string>(p, "kind", "always_prior"));
    e.profile.sigma = get_or(p, "sigma", e.profile.sigma);
    e.profile.beta = get_or(p, "beta", e.profile.beta);
    e.profile.q = get_or(p, "q", e.profile.q);
  }
  return e;
}

}  // namespace detail

/// Builds a configuration from JSON. Relative paths resolve against base_dir.
inline PipelineConfig config_from_json(json j, const fs::path& base_dir, const Overrides& ov = {}) {
  if (!j.is_object()) throw ConfigError("config: top level must be an object");
  if (ov.output_dir) j["output_dir"] = *ov.output_dir;
  if (ov.seed) j["seed"] = *ov.seed;
  if (ov.jobs) j["jobs"] = *ov.jobs;
  if (ov.backend && j.contains("endpoints")) {
    for (auto& [name, ep] : j["endpoints"].items()) ep["backend"] = std::string(to_string(*ov.backend));
  }
  PipelineConfig c;
  try {
    using detail::get_or;
    c.seed = get_or<std::uint64_t>(j, "seed", 0);
    c.jobs = get_or<std::size_t>(j, "jobs", 1);
    c.repeats = get_or(j, "repeats", 1);
    c.instance_retries = get_or(j, "instance_retries", 1);
    c.suite_path = detail::resolve_path(base_dir, get_or<std::string>(j, "suite_path", ""));
    c.output_dir = ov.output_dir ? *ov.output_dir : detail::resolve_path(base_dir, get_or<std::string>(j, "output_dir", "out"));
    c.templates_dir = detail::resolve_path(base_dir, get_or<std::string>(j, "templates_dir", ""));
    if (j.contains("window")) {
      const auto& w = j["window"];
      c.window.history_len = get_or(w, "history_len", c.window.history_len);
      c.window.horizon_len = get_or(w, "horizon_len", c.window.horizon_len);
      c.window.shift_daily = get_or(w, "shift_daily", c.window.shift_daily);
      c.window.shift_weekly = get_or(w, "shift_weekly", c.window.shift_weekly);
    }
    if (j.contains("split")) {
      const auto& s = j["split"];
      if (s.contains("cutoff")) c.split.cutoff = parse_date(s["cutoff"].get<std::string>());
      c.split.id_variables = get_or(s, "id_variables", std::set<std::string>{});
      c.split.ood_variables = get_or(s, "ood_variables", std::set<std::string>{});
    }
    if (j.contains("prior")) {
      const auto& p = j["prior"];
      if (p.contains("file")) {
        c.prior.builtin.reset();
        c.prior.file = detail::resolve_path(base_dir, p["file"].get<std::string>());
      } else {
        c.prior.builtin = parse_prior_kind(get_or<std::string>(p, "builtin", "seasonal_naive"));
      }
    }
    if (j.contains("periods")) {
      c.periods.daily_period = get_or(j["periods"], "daily", c.periods.daily_period);
      c.periods.weekly_period = get_or(j["periods"], "weekly", c.periods.weekly_period);
    }
    if (j.contains("endpoints")) {
      for (const auto& [name, ep] : j["endpoints"].items()) c.endpoints[name] = detail::endpoint_from_json(ep, c.seed);
    }
    if (j.contains("selection")) {
      c.selection.n_samples = get_or(j["selection"], "n_samples", c.selection.n_samples);
      c.selection.k = get_or(j["selection"], "k", c.selection.k);
    }
    c.recipe = parse_recipe(get_or<std::string>(j, "recipe", "top3_fallback"));
    if (j.contains("reward")) {
      const auto& r = j["reward"];
      c.reward.kind = parse_reward_kind(get_or<std::string>(r, "kind", "imp_ratio"));
      c.reward.gamma = get_or(r, "gamma", c.reward.gamma);
      c.reward.eps = get_or(r, "eps", c.reward.eps);
      c.reward.eps_std = get_or(r, "eps_std", c.reward.eps_std);
      c.reward.zero_std_threshold = get_or(r, "zero_std_threshold", c.reward.zero_std_threshold);
      c.reward.invalid_reward = get_or(r, "invalid_reward", c.reward.invalid_reward);
    }
    c.collapse_step_size = get_or<std::size_t>(j, "collapse_step_size", c.collapse_step_size);
    for (const auto& m : get_or(j, "methods", json::array())) {
      c.methods.push_back({m.at("id").get<std::string>(), parse_eval_mode(get_or<std::string>(m, "mode", "prior_only")),
                           get_or<std::string>(m, "endpoint", "")});
    }
    c.simulate.seed = c.seed;
    if (j.contains("simulate")) {
      const auto& s = j["simulate"];
      c.simulate.n_groups = get_or(s, "n_groups", c.simulate.n_groups);
      c.simulate.group_size = get_or(s, "group_size", c.simulate.group_size);
      c.simulate.mae_lo = get_or(s, "mae_lo", c.simulate.mae_lo);
      c.simulate.mae_hi = get_or(s, "mae_hi", c.simulate.mae_hi);
      c.simulate.perturbation = get_or(s, "perturbation", c.simulate.perturbation);
    }
    c.simulate.step_size = c.collapse_step_size;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  c.source = std::move(j);
  c.validate();
  return c;
}

inline PipelineConfig load_config(const std::string& path, const Overrides& ov = {}) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("config '" + path + "' is not valid JSON: " + e.what());
  }
  return config_from_json(std::move(j), fs::absolute(path).parent_path(), ov);
}

inline std::string config_hash(const PipelineConfig& c) { return hex64(fnv1a(c.source.dump())); }

// ---------------------------------------------------------------------------
// File helpers

namespace detail {

inline void write_text_atomic(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ConfigError("cannot write '" + path.string() + "'");
    out << text;
  }
  fs::rename(tmp, path);
}

inline void write_json(const fs::path& path, const json& j) { write_text_atomic(path, j.dump(2) + "\n"); }

template <class Fn>
void write_lines(const fs::path& path, Fn&& emit) {
  std::ostringstream out;
  emit(out);
  write_text_atomic(path, out.str());
}

inline std::vector<ForecastInstance> read_instances_if(const fs::path& path) {
  if (!fs::exists(path)) return {};
  return read_instances(path.string());
}

inline std::vector<ForecastInstance> require_instances(const fs::path& path, std::string_view stage) {
  if (!fs::exists(path)) {
    throw ConfigError("missing '" + path.string() + "'; run the " + std::string(stage) + " stage first");
  }
  return read_instances(path.string());
}

inline TruthOracle truth_oracle(const std::vector<ForecastInstance>& instances) {
  auto table = std::make_shared<std::map<std::string, std::vector<double>>>();
  for (const auto& inst : instances) {
    if (inst.ground_truth) (*table)[inst.instance_id] = *inst.ground_truth;
  }
  return [table](const std::string& id) -> std::optional<std::vector<double>> {
    const auto it = table->find(id);
    if (it == table->end()) return std::nullopt;
    return it->second;
  };
}

inline std::string instance_set_hash(const std::vector<ForecastInstance>& instances) {
  std::uint64_t h = fnv1a("");
  for (const auto& inst : instances) h = fnv1a(inst.instance_id + "\n", h);
  return hex64(h);
}

}  // namespace detail

/// Records what ran, with which configuration, and when.
struct Manifest {
  std::string command;
  std::vector<std::string> args;
  std::string started = Logger::now_iso();

  void write(const fs::path& dir, const PipelineConfig& config, json outputs) const {
    json m{{"command", command},
           {"args", args},
           {"version", REVISEBENCH_VERSION},
           {"config_hash", config_hash(config)},
           {"config", config.source},
           {"seed", config.seed},
           {"started", started},
           {"finished", Logger::now_iso()},
           {"outputs", std::move(outputs)}};
    detail::write_json(dir / "manifest.json", m);
  }
};

struct StageContext {
  const PipelineConfig& config;
  Manifest manifest;
  const Logger& log;
};

inline constexpr const char* kSplitFiles[] = {"post_training", "id_eval", "ood_eval"};

// ---------------------------------------------------------------------------
// Stages

struct WindowsSummary {
  std::map<std::string, std::size_t> per_split;
  std::size_t dropped = 0;
  std::vector<std::string> too_short;
};

inline WindowsSummary cmd_windows(const StageContext& ctx) {
  const auto& c = ctx.config;
  if (c.suite_path.empty()) throw ConfigError("config: suite_path is required");
  const auto suite = ingest_suite(c.suite_path);
  std::map<std::string, std::vector<ForecastInstance>> by_split;
  WindowsSummary s;
  for (const auto* name : kSplitFiles) by_split[name];
  for (std::size_t i = 0; i < suite.records.size(); ++i) {
    auto w = make_windows(suite.records[i], suite.contexts[i], c.window);
    if (w.too_short) {
      s.too_short.push_back(suite.records[i].variable_id);
      ctx.log.warn("series_too_short", {{"variable_id", suite.records[i].variable_id}});
    }
    for (auto& inst : w.instances) {
      const auto sp = assign_split(inst, c.split);
      if (sp == Split::dropped) {
        ++s.dropped;
        continue;
      }
      by_split[std::string(to_string(sp))].push_back(std::move(inst));
    }
  }
  const auto dir = c.out() / "windows";
  json outputs = json::object();
  for (auto& [name, insts] : by_split) {
    std::sort(insts.begin(), insts.end(), [](const auto& a, const auto& b) { return a.instance_id < b.instance_id; });
    detail::write_lines(dir / (name + ".jsonl"), [&](std::ostream& out) { write_instances(out, insts); });
    s.per_split[name] = insts.size();
    outputs[name] = insts.size();
  }
  outputs["dropped"] = s.dropped;
  outputs["too_short"] = s.too_short;
  ctx.log.info("windows_done", outputs);
  ctx.manifest.write(dir, c, outputs);
  return s;
}

inline std::map<std::string, std::size_t> cmd_priors(const StageContext& ctx) {
  const auto& c = ctx.config;
  const auto in_dir = c.out() / "windows";
  const auto dir = c.out() / "priors";
  std::optional<std::map<std::string, PriorEntry>> file_priors;
  if (!c.prior.builtin) {
    auto in = detail::open_input(c.prior.file);
    file_priors = read_prior_file(in);
  }
  std::map<std::string, std::size_t> counts;
  json outputs = json::object();
  for (const auto* name : kSplitFiles) {
    auto insts = detail::require_instances(in_dir / (std::string(name) + ".jsonl"), "windows");
    std::size_t unmatched = 0;
    if (c.prior.builtin) {
      for (auto& inst : insts) apply_naive_prior(inst, *c.prior.builtin, c.periods);
    } else {
      const auto res = attach_priors(insts, *file_priors);
      unmatched = res.unmatched.size();
      if (unmatched) ctx.log.warn("priors_unmatched", {{"split", name}, {"count", unmatched}});
      std::erase_if(insts, [](const ForecastInstance& i) { return !i.prior; });
    }
    detail::write_lines(dir / (std::string(name) + ".jsonl"), [&](std::ostream& out) { write_instances(out, insts); });
    counts[name] = insts.size();
    outputs[name] = {{"instances", insts.size()}, {"unmatched", unmatched}};
  }
  ctx.log.info("priors_done", outputs);
  ctx.manifest.write(dir, c, outputs);
  return counts;
}

inline fs::path trace_cache_dir(const PipelineConfig& c) {
  const auto& ep = c.endpoint("trace_generator");
  return c.out() / "cache" / "traces" / (ep.fingerprint() + "-" + std::to_string(c.seed));
}

/// Samples and verifies candidates for every post-training instance. Failed
/// instances stay out of the cache; the stage then reports a transport error.
inline GenerationOutcome cmd_traces(const StageContext& ctx) {
  const auto& c = ctx.config;
  const auto insts = detail::require_instances(c.out() / "priors" / "post_training.jsonl", "priors");
  const auto client = make_client(c.endpoint("trace_generator"), detail::truth_oracle(insts));
  CandidateCache cache(trace_cache_dir(c));
  auto outcome = generate_all(insts, *client, c.selection, &cache, c.jobs, c.instance_retries, c.templates());
  const auto dir = c.out() / "traces";
  detail::write_lines(dir / "candidates.jsonl", [&](std::ostream& out) {
    for (const auto& r : outcome.results) {
      for (const auto& cand : r.candidates) out << candidate_to_json(cand).dump() << '\n';
    }
  });
  json outputs{{"instances", insts.size()},
               {"generated", outcome.results.size()},
               {"from_cache", outcome.from_cache},
               {"failed", outcome.failed},
               {"cache_dir", trace_cache_dir(c).string()}};
  ctx.log.info("traces_done", outputs);
  ctx.manifest.write(dir, c, outputs);
  if (!outcome.failed.empty()) {
    throw TransportError(std::to_string(outcome.failed.size()) + " instance(s) failed; finished work is cached");
  }
  return outcome;
}

/// Reloads verified candidates from the traces stage output.
inline std::vector<InstanceCandidates> load_candidates(const PipelineConfig& c) {
  const auto insts = detail::require_instances(c.out() / "priors" / "post_training.jsonl", "priors");
  const auto path = c.out() / "traces" / "candidates.jsonl";
  if (!fs::exists(path)) throw ConfigError("missing '" + path.string() + "'; run the traces stage first");
  std::map<std::string, std::vector<std::string>> raw;
  auto in = detail::open_input(path.string());
  detail::for_each_jsonl(in, [&](const json& j, std::size_t lineno) {
    try {
      auto& v = raw[j.at("instance_id").get<std::string>()];
      const auto idx = j.at("trace_index").get<std::size_t>();
      if (v.size() <= idx) v.resize(idx + 1);
      v[idx] = j.at("raw_text").get<std::string>();
    } catch (const json::exception& e) {
      throw ParseError(std::string("bad candidate row: ") + e.what(), lineno);
    }
  });
  std::vector<InstanceCandidates> out;
  for (const auto& inst : insts) {
    const auto it = raw.find(inst.instance_id);
    if (it == raw.end()) continue;
    auto cands = parse_candidates(inst, it->second);
    verify_effectiveness(cands, inst);
    out.push_back({inst, std::move(cands)});
  }
  return out;
}

/// Trainer hyperparameters for the supervised stage. Written, never read back.
inline json sft_config_record() {
  return {{"base_model", "gemma-3-4b-pt"},
          {"finetuning_type", "LoRA"},
          {"lora", {{"rank", 8}, {"alpha", 16}, {"dropout", 0.05}, {"target_modules", "all"}}},
          {"cutoff_len", 8192},
          {"epochs", 3},
          {"per_device_train_batch_size", 1},
          {"gradient_accumulation_steps", 16},
          {"learning_rate", 1.3e-4},
          {"loss", "sample_normalized"}};
}

struct SftOutcome {
  Corpus corpus;
  BucketReport buckets;
};

inline json bucket_to_json(const BucketReport& b) {
  return {{"counts", b.counts}, {"fractions", b.fractions}, {"total", b.total}};
}

inline SftOutcome cmd_sft(const StageContext& ctx, std::optional<Recipe> recipe = std::nullopt) {
  const auto& c = ctx.config;
  const auto r = recipe.value_or(c.recipe);
  const auto data = load_candidates(c);
  SftOutcome res;
  res.corpus = emit_corpus(data, r, c.selection, c.seed, c.templates());
  std::vector<std::vector<std::optional<bool>>> u;
  for (const auto& d : data) {
    auto& row = u.emplace_back();
    for (const auto& cand : d.candidates) row.push_back(cand.effective);
  }
  res.buckets = bucketize(u, c.selection.n_samples);
  const auto dir = c.out() / "sft" / std::string(to_string(r));
  detail::write_lines(dir / "corpus.jsonl", [&](std::ostream& out) { write_corpus(out, res.corpus); });
  detail::write_json(dir / "buckets.json", bucket_to_json(res.buckets));
  const auto& st = res.corpus.stats;
  const json stats{{"instances", st.instances},       {"rows", st.rows},
                   {"intervention_rows", st.intervention_rows}, {"fallback_rows", st.fallback_rows},
                   {"prompt_tokens", st.prompt_tokens}, {"answer_tokens", st.answer_tokens},
                   {"token_counting", "approximate: round(words * 1.3)"}};
  detail::write_json(dir / "stats.json", stats);
  detail::write_json(dir / "sft_config.json", sft_config_record());
  ctx.log.info("sft_done", {{"recipe", std::string(to_string(r))}, {"stats", stats}});
  ctx.manifest.write(dir, c, {{"recipe", std::string(to_string(r))}, {"stats", stats}});
  return res;
}

struct RewardAuditOutcome {
  std::vector<AuditRow> rows;
  CollapseReport collapse;
};

/// Scores completion groups. Input rows: {prompt_id, instance_id, completions: [text, ...]}.
inline RewardAuditOutcome cmd_reward_audit(const StageContext& ctx, const std::string& completions_path) {
  const auto& c = ctx.config;
  std::map<std::string, ForecastInstance> by_id;
  for (const auto* name : kSplitFiles) {
    for (auto& inst : detail::read_instances_if(c.out() / "priors" / (std::string(name) + ".jsonl"))) {
      by_id.emplace(inst.instance_id, std::move(inst));
    }
  }
  RewardAuditOutcome res;
  std::vector<AdvantageGroup> groups;
  auto in = detail::open_input(completions_path);
  detail::for_each_jsonl(in, [&](const json& j, std::size_t lineno) {
    std::string prompt_id, instance_id;
    std::vector<std::string> texts;
    try {
      prompt_id = j.at("prompt_id").get<std::string>();
      instance_id = j.value("instance_id", prompt_id);
      texts = j.at("completions").get<std::vector<std::string>>();
    } catch (const json::exception& e) {
      throw ParseError(std::string("bad completion group: ") + e.what(), lineno);
    }
    const auto it = by_id.find(instance_id);
    if (it == by_id.end()) {
      throw ValidationError("line " + std::to_string(lineno) + ": unknown instance '" + instance_id + "'");
    }
    const auto& inst = it->second;
    if (!inst.prior || !inst.ground_truth) {
      throw ValidationError("instance '" + instance_id + "' needs a prior and ground truth");
    }
    std::vector<RewardOutcome> outcomes;
    for (const auto& t : texts) {
      const auto parsed = parse_output(t, inst.horizon_timestamps);
      std::optional<std::vector<double>> f;
      if (parsed.valid_window) f = parsed.values();
      std::optional<std::span<const double>> fs;
      if (f) fs = std::span<const double>(*f);
      outcomes.push_back(reward(fs, *inst.prior, *inst.ground_truth, c.reward));
    }
    AdvantageGroup g;
    auto rows = audit_group(prompt_id, outcomes, c.reward, &g);
    res.rows.insert(res.rows.end(), rows.begin(), rows.end());
    groups.push_back(std::move(g));
  });
  res.collapse = collapse_diagnostics(groups, c.collapse_step_size, c.reward.zero_std_threshold);
  const auto dir = c.out() / "reward";
  detail::write_lines(dir / "audit.csv", [&](std::ostream& out) { write_audit_csv(out, res.rows); });
  detail::write_json(dir / "collapse.json", collapse_to_json(res.collapse));
  detail::write_json(dir / "rl_config.json", rl_config_record(c.reward));
  const json outputs{{"groups", groups.size()}, {"completions", res.rows.size()}, {"collapse", collapse_to_json(res.collapse)}};
  ctx.log.info("reward_audit_done", outputs);
  ctx.manifest.write(dir, c, outputs);
  return res;
}

struct EvalOutcome {
  std::vector<std::vector<MethodRun>> runs;  // [repeat][method]
  EvalReport report;
  std::vector<ReportNote> notes;
};

/// Eval instances (id then ood) and their split labels.
inline std::pair<std::vector<ForecastInstance>, std::map<std::string, std::string>> eval_instances(
    const PipelineConfig& c) {
  std::vector<ForecastInstance> insts;
  std::map<std::string, std::string> labels;
  for (const auto& [file, label] : {std::pair{"id_eval", "id"}, std::pair{"ood_eval", "ood"}}) {
    for (auto& inst : detail::require_instances(c.out() / "priors" / (std::string(file) + ".jsonl"), "priors")) {
      labels[inst.instance_id] = label;
      insts.push_back(std::move(inst));
    }
  }
  return {std::move(insts), std::move(labels)};
}

/// Runs (or reloads) one method. Cached per (method, mode, endpoint, instance set, repeat).
inline MethodRun run_cached(const PipelineConfig& c, const MethodSpec& m, const std::vector<ForecastInstance>& insts,
                            int repeat, const Logger& log) {
  std::string key = m.id + "|" + std::string(to_string(m.mode)) + "|" + detail::instance_set_hash(insts) + "|" +
                    std::to_string(repeat) + "|" + std::to_string(c.seed);
  std::optional<LlmEndpoint> ep;
  if (m.mode != EvalMode::prior_only) {
    ep = c.endpoint(m.endpoint);
    if (ep->seed) ep->seed = mix_seed(*ep->seed, static_cast<std::uint64_t>(repeat));
    key += "|" + ep->fingerprint();
  }
  const auto path = c.out() / "cache" / "eval" / (m.id + "-" + hex64(fnv1a(key)) + ".jsonl");
  if (fs::exists(path)) {
    std::ifstream in(path);
    auto runs = read_per_example(in);
    if (runs.size() == 1 && runs.front().per_example.size() == insts.size()) {
      log.info("eval_cache_hit", {{"method", m.id}, {"repeat", repeat}});
      return std::move(runs.front());
    }
  }
  std::unique_ptr<LlmClient> client;
  if (ep) client = make_client(*ep, detail::truth_oracle(insts));
  RunOptions opts;
  opts.periods = c.periods;
  opts.templates = c.templates();
  opts.jobs = c.jobs;
  auto run = run_method(insts, m.id, m.mode, client.get(), opts);
  detail::write_lines(path, [&](std::ostream& out) {
    for (const auto& ex : run.per_example) out << example_to_json(ex, run).dump() << '\n';
  });
  log.info("eval_method_done", {{"method", m.id}, {"repeat", repeat}, {"examples", run.per_example.size()}});
  return run;
}

inline EvalOutcome cmd_eval(const StageContext& ctx, const std::vector<std::string>& only_methods = {}) {
  const auto& c = ctx.config;
  std::vector<MethodSpec> methods;
  for (const auto& m : c.methods) {
    if (only_methods.empty() || std::find(only_methods.begin(), only_methods.end(), m.id) != only_methods.end()) {
      methods.push_back(m);
    }
  }
  for (const auto& want : only_methods) {
    if (std::none_of(methods.begin(), methods.end(), [&](const auto& m) { return m.id == want; })) {
      throw ConfigError("unknown method '" + want + "'");
    }
  }
  if (methods.empty()) throw ConfigError("eval: no methods configured");
  const auto [insts, labels] = eval_instances(c);
  if (insts.empty()) throw ValidationError("eval: no evaluation instances");

  EvalOutcome res;
  std::vector<EvalReport> reports;
  for (int rep = 0; rep < c.repeats; ++rep) {
    auto& runs = res.runs.emplace_back();
    for (const auto& m : methods) runs.push_back(run_cached(c, m, insts, rep, ctx.log));
    reports.push_back(aggregate(runs, labels));
  }
  res.report = reports.size() == 1 ? reports.front() : average_reports(reports);
  const auto prior_it = std::find_if(methods.begin(), methods.end(), [](const auto& m) { return m.mode == EvalMode::prior_only; });
  if (prior_it != methods.end()) res.notes = improvement_notes(res.report, prior_it->id);

  const auto dir = c.out() / "eval";
  detail::write_text_atomic(dir / "report.csv", emit_report(res.report, ReportFormat::csv));
  detail::write_text_atomic(dir / "report.md", emit_report(res.report, ReportFormat::markdown, res.notes));
  detail::write_lines(dir / "per_example.jsonl", [&](std::ostream& out) {
    for (const auto& run : res.runs.front()) {
      for (const auto& ex : run.per_example) out << example_to_json(ex, run).dump() << '\n';
    }
  });
  json outputs{{"methods", json::array()}, {"instances", insts.size()}, {"repeats", c.repeats}};
  for (const auto& m : methods) outputs["methods"].push_back(m.id);
  ctx.log.info("eval_done", outputs);
  ctx.manifest.write(dir, c, outputs);
  return res;
}

inline json profile_to_json(const FallbackProfile& p) {
  auto opt = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
  return {{"action", p.is_fallback ? "fallback" : "revision"},
          {"count", p.count},
          {"empty", p.empty},
          {"mean_context_words", p.mean_context_words},
          {"mean_closest_event_gap_days", opt(p.mean_closest_event_gap_days)},
          {"without_events", p.without_events},
          {"mean_rmafd", opt(p.mean_rmafd)},
          {"undefined_rmafd", p.undefined_rmafd}};
}

inline std::string profile_table(const std::pair<FallbackProfile, FallbackProfile>& p) {
  std::ostringstream out;
  out << "| action | outputs | context words | closest event gap (days) | no-event outputs | rMAFD |\n"
      << "| --- | ---: | ---: | ---: | ---: | ---: |\n";
  for (const auto* f : {&p.first, &p.second}) {
    out << "| " << (f->is_fallback ? "fallback" : "revision") << " | " << f->count << " | "
        << (f->empty ? "" : fmt4(f->mean_context_words)) << " | " << fmt4(f->mean_closest_event_gap_days) << " | "
        << f->without_events << " | " << fmt4(f->mean_rmafd) << " |\n";
  }
  return out.str();
}

/// Profiles fallback vs revision decisions of a revise method (ID and OOD pooled).
inline std::pair<FallbackProfile, FallbackProfile> cmd_fallback(const StageContext& ctx, std::string method_id = {}) {
  const auto& c = ctx.config;
  const MethodSpec* spec = nullptr;
  for (const auto& m : c.methods) {
    if ((method_id.empty() && m.mode == EvalMode::revise) || m.id == method_id) {
      spec = &m;
      break;
    }
  }
  if (!spec) throw ConfigError(method_id.empty() ? "fallback: no revise method configured" : "unknown method '" + method_id + "'");
  if (spec->mode != EvalMode::revise) throw ConfigError("fallback: method '" + spec->id + "' is not a revise method");
  const auto [insts, labels] = eval_instances(c);
  const auto run = run_cached(c, *spec, insts, 0, ctx.log);
  const auto prof = fallback_characterize(run, insts);
  const auto dir = c.out() / "fallback";
  detail::write_json(dir / "profile.json", {{"method", spec->id}, {"fallback", profile_to_json(prof.first)},
                                            {"revision", profile_to_json(prof.second)}});
  detail::write_text_atomic(dir / "profile.md", profile_table(prof));
  ctx.log.info("fallback_done", {{"method", spec->id}, {"fallback", prof.first.count}, {"revision", prof.second.count}});
  ctx.manifest.write(dir, c, {{"method", spec->id}});
  return prof;
}

inline RewardContrast cmd_simulate(const StageContext& ctx) {
  const auto& c = ctx.config;
  const auto res = simulate_reward_contrast(c.simulate, c.reward);
  const json out{{"params",
                  {{"seed", c.simulate.seed},
                   {"n_groups", c.simulate.n_groups},
                   {"group_size", c.simulate.group_size},
                   {"mae_lo", c.simulate.mae_lo},
                   {"mae_hi", c.simulate.mae_hi},
                   {"perturbation", c.simulate.perturbation},
                   {"step_size", c.simulate.step_size},
                   {"gamma", c.reward.gamma}}},
                 {"exp_mae", collapse_to_json(res.exp_mae)},
                 {"imp_ratio", collapse_to_json(res.imp_ratio)}};
  const auto dir = c.out() / "simulate";
  detail::write_json(dir / "contrast.json", out);
  ctx.log.info("simulate_done", out);
  ctx.manifest.write(dir, c, out);
  return res;
}

}  // namespace revisebench
