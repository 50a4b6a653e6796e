#pragma once

// Reasoning-trace corpus builder: sample candidate revisions, verify them against the
// prior on the realized horizon, keep the Top-K effective ones (or a single
// fallback row when none improves), and write the corpus.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "revisebench/core_data.hpp"
#include "revisebench/llm_client.hpp"
#include "revisebench/metrics.hpp"
#include "revisebench/parallel.hpp"
#include "revisebench/prompt_io.hpp"

namespace revisebench {

struct CandidateTrace {
  std::string instance_id;
  int trace_index = 0;
  std::string raw_text;
  std::string analysis;
  std::optional<std::vector<double>> forecast;  // set iff valid_window
  ParseStatus parse_status = ParseStatus::missing_forecast;
  bool valid_window = false;
  std::optional<double> candidate_mae;
  std::optional<bool> effective;

  bool is_effective() const { return effective.value_or(false); }
};

struct SelectionConfig {
  int n_samples = 5;
  int k = 3;

  void validate() const {
    if (n_samples < 1 || k < 1 || k > n_samples) throw ConfigError("selection: need 1 <= K <= n_samples");
  }
};

enum class RowKind { intervention, fallback };

inline std::string_view to_string(RowKind k) { return k == RowKind::intervention ? "intervention" : "fallback"; }

struct SftRow {
  std::string instance_id;
  std::string context;
  std::vector<Point> history;
  std::vector<Date> requested_timestamps;
  std::vector<double> initial_forecast;
  std::string prompt_text;

  std::string analysis;
  std::vector<double> forecast;
  SerializedResponse response;
  RowKind row_kind = RowKind::intervention;
  std::optional<int> trace_index;
  std::optional<double> candidate_mae;

  std::int64_t prompt_tokens = 0;
  std::int64_t answer_tokens = 0;
};

using TokenCounter = std::function<std::int64_t(std::string_view)>;

inline TokenCounter default_token_counter() {
  return [](std::string_view s) { return approx_tokens(s); };
}

// ---------------------------------------------------------------------------
// Candidates

/// Parses raw samples into candidates (no verification yet).
inline std::vector<CandidateTrace> parse_candidates(const ForecastInstance& instance,
                                                    const std::vector<std::string>& samples) {
  std::vector<CandidateTrace> out;
  out.reserve(samples.size());
  for (std::size_t j = 0; j < samples.size(); ++j) {
    CandidateTrace c;
    c.instance_id = instance.instance_id;
    c.trace_index = static_cast<int>(j);
    c.raw_text = samples[j];
    const auto parsed = parse_output(samples[j], instance.horizon_timestamps);
    c.analysis = parsed.analysis.value_or("");
    c.parse_status = parsed.parse_status;
    c.valid_window = parsed.valid_window;
    if (parsed.valid_window) c.forecast = parsed.values();
    out.push_back(std::move(c));
  }
  return out;
}

/// Renders the revise prompt (ground truth never enters it) and samples n candidates.
inline std::vector<CandidateTrace> generate_candidates(const ForecastInstance& instance, LlmClient& client,
                                                       const SelectionConfig& selection,
                                                       const TemplateSet& templates = {}) {
  selection.validate();
  const auto prompt = render_prompt(instance, PromptMode::revise, templates);
  const auto result = client.complete({prompt.text, selection.n_samples, instance.instance_id});
  return parse_candidates(instance, result.samples);
}

/// Sets candidate_mae for valid windows and u = [candidate MAE < prior MAE]
/// for well-formed ones. Malformed candidates keep u undefined.
inline void verify_effectiveness(std::vector<CandidateTrace>& candidates, const ForecastInstance& instance) {
  if (!instance.ground_truth) {
    throw ValidationError("verify_effectiveness: '" + instance.instance_id + "' has no ground truth");
  }
  if (!instance.prior) throw ValidationError("verify_effectiveness: '" + instance.instance_id + "' has no prior");
  const double prior_mae = mean_absolute_error(*instance.prior, *instance.ground_truth);
  for (auto& c : candidates) {
    c.candidate_mae.reset();
    c.effective.reset();
    if (!c.valid_window || !c.forecast) continue;
    c.candidate_mae = mean_absolute_error(*c.forecast, *instance.ground_truth);
    if (c.parse_status == ParseStatus::ok) c.effective = *c.candidate_mae < prior_mae;
  }
}

inline std::string fallback_analysis(const std::string& variable_id) {
  return "- The available context for " + variable_id +
         " does not support a reliable revision of the initial forecast.\n"
         "- I keep the initial forecast unchanged.";
}

namespace detail {

inline SftRow base_row(const ForecastInstance& instance, const TemplateSet& templates, const TokenCounter& tokens) {
  SftRow r;
  r.instance_id = instance.instance_id;
  r.context = instance.context.raw_text;
  r.history = instance.history;
  r.requested_timestamps = instance.horizon_timestamps;
  r.initial_forecast = *instance.prior;
  r.prompt_text = render_prompt(instance, PromptMode::revise, templates).text;
  r.prompt_tokens = tokens(r.prompt_text);
  return r;
}

inline void set_target(SftRow& r, std::string analysis, std::vector<double> forecast, const TokenCounter& tokens) {
  r.analysis = std::move(analysis);
  r.forecast = std::move(forecast);
  r.response = serialize_response(r.analysis, r.requested_timestamps, r.forecast);
  r.answer_tokens = tokens(r.response.text);
}

/// Effective candidates ordered by (MAE, trace_index).
inline std::vector<const CandidateTrace*> ranked_effective(std::span<const CandidateTrace> candidates) {
  std::vector<const CandidateTrace*> eff;
  for (const auto& c : candidates) {
    if (c.is_effective()) eff.push_back(&c);
  }
  std::sort(eff.begin(), eff.end(), [](const CandidateTrace* a, const CandidateTrace* b) {
    if (*a->candidate_mae != *b->candidate_mae) return *a->candidate_mae < *b->candidate_mae;
    return a->trace_index < b->trace_index;
  });
  return eff;
}

inline std::vector<SftRow> intervention_rows(const ForecastInstance& instance,
                                             const std::vector<const CandidateTrace*>& chosen,
                                             const TemplateSet& templates, const TokenCounter& tokens) {
  std::vector<SftRow> rows;
  if (chosen.empty()) return rows;
  const SftRow base = base_row(instance, templates, tokens);
  for (const auto* c : chosen) {
    SftRow r = base;
    r.row_kind = RowKind::intervention;
    r.trace_index = c->trace_index;
    r.candidate_mae = c->candidate_mae;
    set_target(r, c->analysis, *c->forecast, tokens);
    rows.push_back(std::move(r));
  }
  return rows;
}

}  // namespace detail

inline SftRow make_fallback_row(const ForecastInstance& instance, const TemplateSet& templates = {},
                                const TokenCounter& tokens = default_token_counter()) {
  SftRow r = detail::base_row(instance, templates, tokens);
  r.row_kind = RowKind::fallback;
  detail::set_target(r, fallback_analysis(instance.variable_id), *instance.prior, tokens);
  return r;
}

/// Top-K effective candidates by ascending MAE (ties: lower trace_index first);
/// exactly one fallback row when none is effective.
inline std::vector<SftRow> select_topk(std::span<const CandidateTrace> candidates, const ForecastInstance& instance,
                                       const SelectionConfig& selection, const TemplateSet& templates = {},
                                       const TokenCounter& tokens = default_token_counter()) {
  selection.validate();
  auto eff = detail::ranked_effective(candidates);
  if (eff.empty()) return {make_fallback_row(instance, templates, tokens)};
  if (eff.size() > static_cast<std::size_t>(selection.k)) eff.resize(static_cast<std::size_t>(selection.k));
  return detail::intervention_rows(instance, eff, templates, tokens);
}

// ---------------------------------------------------------------------------
// Buckets

struct BucketReport {
  std::vector<std::size_t> counts;  // index b = number of effective candidates
  std::vector<double> fractions;
  std::size_t total = 0;
};

inline int effective_count(std::span<const CandidateTrace> candidates) {
  return static_cast<int>(std::count_if(candidates.begin(), candidates.end(),
                                        [](const CandidateTrace& c) { return c.is_effective(); }));
}

/// Buckets instances by their number of effective candidates (undefined u counts as 0).
inline BucketReport bucketize(const std::vector<std::vector<std::optional<bool>>>& per_instance_u, int n_samples) {
  BucketReport r;
  r.counts.assign(static_cast<std::size_t>(n_samples) + 1, 0);
  for (const auto& u : per_instance_u) {
    std::size_t b = 0;
    for (const auto& x : u) b += x.value_or(false) ? 1 : 0;
    if (b >= r.counts.size()) throw ValidationError("bucketize: more effective candidates than samples");
    ++r.counts[b];
  }
  r.total = per_instance_u.size();
  for (auto c : r.counts) r.fractions.push_back(r.total ? static_cast<double>(c) / static_cast<double>(r.total) : 0.0);
  return r;
}

// ---------------------------------------------------------------------------
// Corpus recipes

enum class Recipe { top3_fallback, top1, random3, all_effective, high_validity, all_revisable };

inline std::string_view to_string(Recipe r) {
  switch (r) {
    case Recipe::top3_fallback: return "top3_fallback";
    case Recipe::top1: return "top1";
    case Recipe::random3: return "random3";
    case Recipe::all_effective: return "all_effective";
    case Recipe::high_validity: return "high_validity";
    case Recipe::all_revisable: return "all_revisable";
  }
  return "top3_fallback";
}

inline Recipe parse_recipe(std::string_view s) {
  for (auto r : {Recipe::top3_fallback, Recipe::top1, Recipe::random3, Recipe::all_effective, Recipe::high_validity,
                 Recipe::all_revisable}) {
    if (to_string(r) == s) return r;
  }
  throw ConfigError("unknown corpus recipe '" + std::string(s) + "'");
}

struct InstanceCandidates {
  ForecastInstance instance;
  std::vector<CandidateTrace> candidates;  // verified
};

struct CorpusStats {
  std::size_t instances = 0;
  std::size_t rows = 0;
  std::size_t intervention_rows = 0;
  std::size_t fallback_rows = 0;
  std::int64_t prompt_tokens = 0;
  std::int64_t answer_tokens = 0;
};

struct Corpus {
  std::vector<SftRow> rows;
  CorpusStats stats;
};

/// Applies a selection recipe to verified candidates.
///  top3_fallback  Top-K effective, one fallback row for 0-effective instances
///  top1           single best effective candidate, no fallback
///  random3        3 of the raw candidates drawn per instance, effective ones kept
///  all_effective  every effective candidate
///  high_validity  Top-K, only instances with >= n_samples - 1 effective
///  all_revisable  Top-K, only instances with >= 1 effective
/// Rows come out sorted by instance_id, then ascending candidate MAE.
inline Corpus emit_corpus(std::span<const InstanceCandidates> data, Recipe recipe, const SelectionConfig& selection,
                          std::uint64_t seed, const TemplateSet& templates = {},
                          const TokenCounter& tokens = default_token_counter()) {
  selection.validate();
  std::vector<const InstanceCandidates*> order;
  for (const auto& d : data) order.push_back(&d);
  std::sort(order.begin(), order.end(),
            [](const auto* a, const auto* b) { return a->instance.instance_id < b->instance.instance_id; });

  Corpus corpus;
  const auto K = static_cast<std::size_t>(selection.k);
  for (const auto* d : order) {
    const auto& inst = d->instance;
    auto eff = detail::ranked_effective(d->candidates);
    std::vector<SftRow> rows;
    switch (recipe) {
      case Recipe::top3_fallback:
        rows = select_topk(d->candidates, inst, selection, templates, tokens);
        break;
      case Recipe::top1:
        if (eff.size() > 1) eff.resize(1);
        rows = detail::intervention_rows(inst, eff, templates, tokens);
        break;
      case Recipe::all_effective:
        rows = detail::intervention_rows(inst, eff, templates, tokens);
        break;
      case Recipe::high_validity:
      case Recipe::all_revisable: {
        const auto need = recipe == Recipe::high_validity ? static_cast<std::size_t>(std::max(1, selection.n_samples - 1)) : 1;
        if (eff.size() < need) break;
        if (eff.size() > K) eff.resize(K);
        rows = detail::intervention_rows(inst, eff, templates, tokens);
        break;
      }
      case Recipe::random3: {
        std::vector<std::size_t> idx(d->candidates.size());
        std::iota(idx.begin(), idx.end(), std::size_t{0});
        Rng rng(mix_seed(seed, fnv1a(inst.instance_id)));
        const std::size_t take = std::min<std::size_t>(3, idx.size());
        for (std::size_t i = 0; i < take; ++i) std::swap(idx[i], idx[i + rng.below(idx.size() - i)]);
        std::vector<CandidateTrace> drawn;
        for (std::size_t i = 0; i < take; ++i) drawn.push_back(d->candidates[idx[i]]);
        rows = detail::intervention_rows(inst, detail::ranked_effective(drawn), templates, tokens);
        break;
      }
    }
    ++corpus.stats.instances;
    for (auto& r : rows) {
      ++(r.row_kind == RowKind::fallback ? corpus.stats.fallback_rows : corpus.stats.intervention_rows);
      corpus.stats.prompt_tokens += r.prompt_tokens;
      corpus.stats.answer_tokens += r.answer_tokens;
      corpus.rows.push_back(std::move(r));
    }
  }
  corpus.stats.rows = corpus.rows.size();
  return corpus;
}

inline json sft_row_to_json(const SftRow& r) {
  json hist = json::array();
  for (const auto& p : r.history) hist.push_back(json::array({p.timestamp.timestamp(), p.value}));
  json init = json::array();
  json fc = json::array();
  json ts = json::array();
  for (std::size_t t = 0; t < r.requested_timestamps.size(); ++t) {
    const auto stamp = r.requested_timestamps[t].timestamp();
    ts.push_back(stamp);
    init.push_back(json::array({stamp, r.initial_forecast[t]}));
    fc.push_back(json::array({stamp, r.forecast[t]}));
  }
  json j{{"instance_id", r.instance_id},
         {"prompt",
          {{"context", r.context},
           {"history", std::move(hist)},
           {"initial_forecast", std::move(init)},
           {"requested_timestamps", std::move(ts)},
           {"text", r.prompt_text}}},
         {"target", {{"analysis", r.analysis}, {"forecast", std::move(fc)}, {"response", r.response.text}}},
         {"row_kind", std::string(to_string(r.row_kind))},
         {"spans",
          {{"analysis", {r.response.analysis_span.first, r.response.analysis_span.second}},
           {"forecast", {r.response.forecast_span.first, r.response.forecast_span.second}}}},
         {"approx_tokens", {{"prompt", r.prompt_tokens}, {"answer", r.answer_tokens}}}};
  if (r.trace_index) j["trace_index"] = *r.trace_index;
  if (r.candidate_mae) j["candidate_mae"] = *r.candidate_mae;
  return j;
}

inline void write_corpus(std::ostream& out, const Corpus& corpus) {
  for (const auto& r : corpus.rows) out << sft_row_to_json(r).dump() << '\n';
}

// ---------------------------------------------------------------------------
// Loss utility

/// Mean next-token cross entropy over the whole supervised response:
/// sum(ce) / (|ce| + eps). Both spans carry weight 1.
inline double sample_normalized_loss(std::span<const double> token_ce, std::size_t analysis_span_len,
                                     std::size_t forecast_span_len, double eps = 1e-8) {
  if (token_ce.empty()) throw ValidationError("sample_normalized_loss: empty token list");
  if (analysis_span_len + forecast_span_len != token_ce.size()) {
    throw ValidationError("sample_normalized_loss: span lengths do not cover the supervised tokens");
  }
  if (!(eps > 0.0)) throw ValidationError("sample_normalized_loss: eps must be > 0");
  double s = 0.0;
  for (double ce : token_ce) {
    if (!(ce >= 0.0)) throw ValidationError("sample_normalized_loss: cross entropy must be >= 0");
    s += ce;
  }
  return s / (static_cast<double>(token_ce.size()) + eps);
}

struct RowTokenLosses {
  std::vector<double> token_ce;
  std::size_t analysis_span_len = 0;
  std::size_t forecast_span_len = 0;
};

inline double dataset_loss(std::span<const RowTokenLosses> rows, double eps = 1e-8) {
  if (rows.empty()) throw ValidationError("dataset_loss: no rows");
  double s = 0.0;
  for (const auto& r : rows) s += sample_normalized_loss(r.token_ce, r.analysis_span_len, r.forecast_span_len, eps);
  return s / static_cast<double>(rows.size());
}

// ---------------------------------------------------------------------------
// Candidate cache

inline json candidate_to_json(const CandidateTrace& c) {
  json j{{"instance_id", c.instance_id},
         {"trace_index", c.trace_index},
         {"raw_text", c.raw_text},
         {"parse_status", std::string(to_string(c.parse_status))},
         {"forecast", c.forecast ? json(*c.forecast) : json(nullptr)},
         {"candidate_mae", c.candidate_mae ? json(*c.candidate_mae) : json(nullptr)},
         {"effective", c.effective ? json(*c.effective) : json(nullptr)}};
  return j;
}

/// Sharded JSON-Lines store of raw candidates, keyed by instance id inside a
/// directory that is itself keyed by (endpoint fingerprint, seed). Parsed
/// fields are recomputed from raw_text on load.
class CandidateCache {
 public:
  explicit CandidateCache(std::filesystem::path dir, std::size_t shards = 16) : dir_(std::move(dir)), shards_(shards) {
    std::filesystem::create_directories(dir_);
    for (std::size_t s = 0; s < shards_; ++s) {
      std::ifstream in(shard_path(s));
      if (!in) continue;
      detail::for_each_jsonl(in, [&](const json& j, std::size_t) {
        auto& v = raw_[j.at("instance_id").get<std::string>()];
        const auto idx = j.at("trace_index").get<std::size_t>();
        if (v.size() <= idx) v.resize(idx + 1);
        v[idx] = j.at("raw_text").get<std::string>();
      });
    }
  }

  bool contains(const std::string& id, std::size_t n_samples) const {
    std::lock_guard lock(mu_);
    const auto it = raw_.find(id);
    return it != raw_.end() && it->second.size() >= n_samples;
  }

  std::vector<std::string> samples(const std::string& id) const {
    std::lock_guard lock(mu_);
    return raw_.at(id);
  }

  void put(const std::vector<CandidateTrace>& candidates) {
    std::lock_guard lock(mu_);
    for (const auto& c : candidates) {
      auto& v = raw_[c.instance_id];
      if (v.size() <= static_cast<std::size_t>(c.trace_index)) v.resize(static_cast<std::size_t>(c.trace_index) + 1);
      v[static_cast<std::size_t>(c.trace_index)] = c.raw_text;
      verified_[c.instance_id + "#" + std::to_string(c.trace_index)] = c;
    }
  }

  /// Rewrites every shard, sorted by (instance_id, trace_index).
  void flush() const {
    std::lock_guard lock(mu_);
    std::vector<std::ofstream> outs;
    std::vector<std::filesystem::path> tmp;
    for (std::size_t s = 0; s < shards_; ++s) {
      tmp.push_back(shard_path(s).string() + ".tmp");
      outs.emplace_back(tmp.back(), std::ios::binary | std::ios::trunc);
    }
    for (const auto& [id, texts] : raw_) {
      auto& out = outs[fnv1a(id) % shards_];
      for (std::size_t j = 0; j < texts.size(); ++j) {
        const auto it = verified_.find(id + "#" + std::to_string(j));
        CandidateTrace c;
        if (it != verified_.end()) {
          c = it->second;
        } else {
          c.instance_id = id;
          c.trace_index = static_cast<int>(j);
          c.raw_text = texts[j];
        }
        out << candidate_to_json(c).dump() << '\n';
      }
    }
    for (std::size_t s = 0; s < shards_; ++s) {
      outs[s].close();
      std::filesystem::rename(tmp[s], shard_path(s));
    }
  }

  std::size_t size() const {
    std::lock_guard lock(mu_);
    return raw_.size();
  }

 private:
  std::filesystem::path shard_path(std::size_t s) const {
    char name[32];
    std::snprintf(name, sizeof name, "shard-%03zu.jsonl", s);
    return dir_ / name;
  }

  std::filesystem::path dir_;
  std::size_t shards_;
  mutable std::mutex mu_;
  std::map<std::string, std::vector<std::string>> raw_;
  std::map<std::string, CandidateTrace> verified_;
};

struct GenerationOutcome {
  std::vector<InstanceCandidates> results;  // sorted by instance_id
  std::vector<std::string> failed;
  std::size_t from_cache = 0;
};

/// Generates (or loads from cache) and verifies candidates for every instance.
/// Instances whose endpoint keeps failing after `instance_retries` extra tries
/// are reported in `failed`; everything finished so far stays in the cache.
inline GenerationOutcome generate_all(const std::vector<ForecastInstance>& instances, LlmClient& client,
                                      const SelectionConfig& selection, CandidateCache* cache, std::size_t jobs,
                                      int instance_retries = 1, const TemplateSet& templates = {}) {
  selection.validate();
  GenerationOutcome out;
  std::vector<std::optional<InstanceCandidates>> slots(instances.size());
  std::mutex mu;
  parallel_for(instances.size(), jobs, [&](std::size_t i) {
    const auto& inst = instances[i];
    std::vector<CandidateTrace> cands;
    bool cached = false;
    if (cache && cache->contains(inst.instance_id, static_cast<std::size_t>(selection.n_samples))) {
      auto samples = cache->samples(inst.instance_id);
      samples.resize(static_cast<std::size_t>(selection.n_samples));
      cands = parse_candidates(inst, samples);
      cached = true;
    } else {
      for (int attempt = 0;; ++attempt) {
        try {
          cands = generate_candidates(inst, client, selection, templates);
          break;
        } catch (const TransportError&) {
          if (attempt >= instance_retries) {
            std::lock_guard lock(mu);
            out.failed.push_back(inst.instance_id);
            return;
          }
        }
      }
    }
    verify_effectiveness(cands, inst);
    if (cache) cache->put(cands);
    std::lock_guard lock(mu);
    if (cached) ++out.from_cache;
    slots[i] = InstanceCandidates{inst, std::move(cands)};
  });
  for (auto& s : slots) {
    if (s) out.results.push_back(std::move(*s));
  }
  std::sort(out.results.begin(), out.results.end(),
            [](const auto& a, const auto& b) { return a.instance.instance_id < b.instance.instance_id; });
  std::sort(out.failed.begin(), out.failed.end());
  if (cache) cache->flush();
  return out;
}

}  // namespace revisebench
