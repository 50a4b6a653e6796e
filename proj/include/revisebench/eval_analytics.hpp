#pragma once

// Benchmark harness: prior-only, direct, revise and ensemble runs, split-level
// aggregation with nearest-rank quantiles and average ranks, fallback
// characterisation and CSV/Markdown leaderboards.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "revisebench/core_data.hpp"
#include "revisebench/llm_client.hpp"
#include "revisebench/metrics.hpp"
#include "revisebench/parallel.hpp"
#include "revisebench/prompt_io.hpp"

namespace revisebench {

enum class EvalMode { prior_only, direct, revise, ensemble };

inline std::string_view to_string(EvalMode m) {
  switch (m) {
    case EvalMode::prior_only: return "prior_only";
    case EvalMode::direct: return "direct";
    case EvalMode::revise: return "revise";
    case EvalMode::ensemble: return "ensemble";
  }
  return "prior_only";
}

inline EvalMode parse_eval_mode(std::string_view s) {
  for (auto m : {EvalMode::prior_only, EvalMode::direct, EvalMode::revise, EvalMode::ensemble}) {
    if (to_string(m) == s) return m;
  }
  throw ConfigError("unknown evaluation mode '" + std::string(s) + "'");
}

struct ExampleResult {
  std::string instance_id;
  std::vector<double> forecast;
  MetricReport metrics;
  bool valid_window = true;
  bool used_evaluator_fallback = false;
  bool is_model_fallback = false;
};

struct MethodRun {
  std::string method_id;
  EvalMode mode = EvalMode::prior_only;
  std::vector<ExampleResult> per_example;  // sorted by instance_id
};

struct RunOptions {
  SeasonalPeriodMap periods;
  TemplateSet templates;
  std::size_t jobs = 1;
  double fallback_rel_tol = 1e-9;
};

/// Runs one method over the instances. Invalid model output falls back to the
/// prior (revise/ensemble) or to seasonal naive (direct).
inline MethodRun run_method(const std::vector<ForecastInstance>& instances, const std::string& method_id, EvalMode mode,
                            LlmClient* client, const RunOptions& options = {}) {
  const bool needs_prior = mode != EvalMode::direct;
  const bool needs_client = mode != EvalMode::prior_only;
  if (needs_client && !client) throw ConfigError("method '" + method_id + "' needs an endpoint");
  for (const auto& inst : instances) {
    if (needs_prior && !inst.prior) {
      throw ConfigError("method '" + method_id + "' needs priors; '" + inst.instance_id + "' has none");
    }
  }
  MethodRun run{method_id, mode, std::vector<ExampleResult>(instances.size())};
  parallel_for(instances.size(), options.jobs, [&](std::size_t i) {
    const auto& inst = instances[i];
    ExampleResult ex;
    ex.instance_id = inst.instance_id;
    if (mode == EvalMode::prior_only) {
      ex.forecast = *inst.prior;
    } else {
      const auto pmode = mode == EvalMode::revise ? PromptMode::revise : PromptMode::direct;
      const auto prompt = render_prompt(inst, pmode, options.templates);
      const auto res = client->complete({prompt.text, 1, inst.instance_id});
      const auto parsed = parse_output(res.samples.at(0), inst.horizon_timestamps);
      ex.valid_window = parsed.valid_window;
      if (!parsed.valid_window) {
        ex.used_evaluator_fallback = true;
        ex.forecast = mode == EvalMode::direct
                          ? seasonal_naive(inst.history_values(), inst.frequency, inst.horizon(), options.periods)
                          : *inst.prior;
      } else if (mode == EvalMode::ensemble) {
        const auto llm = parsed.values();
        ex.forecast.resize(llm.size());
        for (std::size_t t = 0; t < llm.size(); ++t) ex.forecast[t] = 0.5 * (llm[t] + (*inst.prior)[t]);
      } else {
        ex.forecast = parsed.values();
        if (mode == EvalMode::revise) ex.is_model_fallback = detect_fallback(parsed, *inst.prior, options.fallback_rel_tol);
      }
    }
    ex.metrics = score(ex.forecast, inst, options.periods);
    run.per_example[i] = std::move(ex);
  });
  std::sort(run.per_example.begin(), run.per_example.end(),
            [](const auto& a, const auto& b) { return a.instance_id < b.instance_id; });
  return run;
}

// ---------------------------------------------------------------------------
// Aggregation

inline constexpr double kQuantileLevels[] = {0.50, 0.75, 0.90, 0.95, 0.99};

/// Nearest-rank quantile: the ceil(p * n)-th smallest value (1-based).
inline double nearest_rank(std::vector<double> values, double p) {
  if (values.empty()) throw ValidationError("nearest_rank: no values");
  std::sort(values.begin(), values.end());
  const double n = static_cast<double>(values.size());
  auto rank = static_cast<std::size_t>(std::ceil(p * n - 1e-12));
  rank = std::clamp<std::size_t>(rank, 1, values.size());
  return values[rank - 1];
}

struct SplitMetrics {
  std::string method_id;
  std::string split;
  std::size_t examples = 0;
  std::optional<double> mean_nmae;
  std::optional<double> mean_nmse;
  std::vector<double> nmse_quantiles;  // aligned with kQuantileLevels; empty when undefined
  double valid_window_rate = 0.0;
  double model_fallback_rate = 0.0;
  double evaluator_fallback_rate = 0.0;
  std::size_t undefined_metric_count = 0;
  double avg_rank = 0.0;
};

struct EvalReport {
  std::vector<SplitMetrics> rows;  // sorted by (split, method_id)

  const SplitMetrics* find(const std::string& method_id, const std::string& split) const {
    for (const auto& r : rows) {
      if (r.method_id == method_id && r.split == split) return &r;
    }
    return nullptr;
  }
};

namespace detail {

/// 1-based ranks, lower value is better, ties share the mean of their ranks;
/// undefined values rank after every defined one.
inline std::vector<double> tied_ranks(const std::vector<std::optional<double>>& v) {
  const std::size_t n = v.size();
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  auto key_less = [&](std::size_t a, std::size_t b) {
    if (!v[a]) return false;
    if (!v[b]) return true;
    return *v[a] < *v[b];
  };
  std::stable_sort(order.begin(), order.end(), key_less);
  std::vector<double> ranks(n);
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && !key_less(order[i], order[j + 1]) && !key_less(order[j + 1], order[i])) ++j;
    const double r = (static_cast<double>(i + 1) + static_cast<double>(j + 1)) / 2.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

}  // namespace detail

/// Per-example metrics averaged per (method, split). split_of maps instance ids
/// to split labels; instances without a label are ignored.
inline EvalReport aggregate(const std::vector<MethodRun>& runs, const std::map<std::string, std::string>& split_of) {
  if (runs.empty()) throw ValidationError("aggregate: no runs");
  std::set<std::string> reference;
  for (const auto& ex : runs.front().per_example) reference.insert(ex.instance_id);
  for (const auto& run : runs) {
    std::set<std::string> ids;
    for (const auto& ex : run.per_example) ids.insert(ex.instance_id);
    if (ids != reference || ids.size() != run.per_example.size()) {
      throw ValidationError("aggregate: run '" + run.method_id + "' covers a different instance set");
    }
  }
  std::set<std::string> splits;
  for (const auto& [id, s] : split_of) {
    if (reference.count(id)) splits.insert(s);
  }

  EvalReport report;
  for (const auto& split : splits) {
    std::vector<SplitMetrics> block;
    for (const auto& run : runs) {
      SplitMetrics m;
      m.method_id = run.method_id;
      m.split = split;
      std::vector<double> nmae, nmse;
      std::size_t valid = 0, model_fb = 0, eval_fb = 0, revise_valid = 0;
      for (const auto& ex : run.per_example) {
        const auto it = split_of.find(ex.instance_id);
        if (it == split_of.end() || it->second != split) continue;
        ++m.examples;
        if (ex.valid_window) ++valid;
        if (ex.used_evaluator_fallback) ++eval_fb;
        if (run.mode == EvalMode::revise && ex.valid_window && !ex.used_evaluator_fallback) {
          ++revise_valid;
          if (ex.is_model_fallback) ++model_fb;
        }
        if (ex.metrics.normalized_defined()) {
          nmae.push_back(*ex.metrics.nmae);
          nmse.push_back(*ex.metrics.nmse);
        } else {
          ++m.undefined_metric_count;
        }
      }
      const auto n = static_cast<double>(m.examples);
      m.valid_window_rate = m.examples ? static_cast<double>(valid) / n : 0.0;
      m.evaluator_fallback_rate = m.examples ? static_cast<double>(eval_fb) / n : 0.0;
      m.model_fallback_rate = revise_valid ? static_cast<double>(model_fb) / static_cast<double>(revise_valid) : 0.0;
      if (!nmae.empty()) {
        double a = 0.0, s = 0.0;
        for (double x : nmae) a += x;
        for (double x : nmse) s += x;
        m.mean_nmae = a / static_cast<double>(nmae.size());
        m.mean_nmse = s / static_cast<double>(nmse.size());
        for (double p : kQuantileLevels) m.nmse_quantiles.push_back(nearest_rank(nmse, p));
      }
      block.push_back(std::move(m));
    }
    std::vector<std::optional<double>> a, s;
    for (const auto& m : block) {
      a.push_back(m.mean_nmae);
      s.push_back(m.mean_nmse);
    }
    const auto ra = detail::tied_ranks(a);
    const auto rs = detail::tied_ranks(s);
    for (std::size_t i = 0; i < block.size(); ++i) block[i].avg_rank = 0.5 * (ra[i] + rs[i]);
    std::sort(block.begin(), block.end(), [](const auto& x, const auto& y) { return x.method_id < y.method_id; });
    for (auto& m : block) report.rows.push_back(std::move(m));
  }
  return report;
}

/// Field-wise mean of repeated reports over the same (method, split) rows.
inline EvalReport average_reports(const std::vector<EvalReport>& reports) {
  if (reports.empty()) throw ValidationError("average_reports: nothing to average");
  EvalReport out = reports.front();
  const auto k = static_cast<double>(reports.size());
  for (auto& row : out.rows) {
    double nmae = 0.0, nmse = 0.0, valid = 0.0, mfb = 0.0, efb = 0.0, rank = 0.0;
    std::vector<double> q(row.nmse_quantiles.size(), 0.0);
    bool defined = row.mean_nmae.has_value();
    for (const auto& rep : reports) {
      const auto* r = rep.find(row.method_id, row.split);
      if (!r) throw ValidationError("average_reports: reports cover different rows");
      if (!r->mean_nmae || r->nmse_quantiles.size() != q.size()) {
        defined = false;
      } else {
        nmae += *r->mean_nmae;
        nmse += *r->mean_nmse;
        for (std::size_t i = 0; i < q.size(); ++i) q[i] += r->nmse_quantiles[i];
      }
      valid += r->valid_window_rate;
      mfb += r->model_fallback_rate;
      efb += r->evaluator_fallback_rate;
      rank += r->avg_rank;
    }
    if (defined) {
      row.mean_nmae = nmae / k;
      row.mean_nmse = nmse / k;
      for (auto& x : q) x /= k;
      row.nmse_quantiles = q;
    }
    row.valid_window_rate = valid / k;
    row.model_fallback_rate = mfb / k;
    row.evaluator_fallback_rate = efb / k;
    row.avg_rank = rank / k;
  }
  return out;
}

struct Improvement {
  std::optional<double> nmae_pct;
  std::optional<double> nmse_pct;
};

/// 100 * (prior - method) / prior on split means.
inline std::optional<double> improvement_pct(std::optional<double> prior, std::optional<double> method) {
  if (!prior || !method || *prior == 0.0) return std::nullopt;
  return 100.0 * (*prior - *method) / *prior;
}

inline Improvement improvement_over_prior(const SplitMetrics& method, const SplitMetrics& prior) {
  return {improvement_pct(prior.mean_nmae, method.mean_nmae), improvement_pct(prior.mean_nmse, method.mean_nmse)};
}

// ---------------------------------------------------------------------------
// Fallback characterisation

struct FallbackProfile {
  bool is_fallback = false;
  bool empty = true;
  std::size_t count = 0;
  double mean_context_words = 0.0;
  std::optional<double> mean_closest_event_gap_days;
  std::size_t without_events = 0;
  std::optional<double> mean_rmafd;
  std::size_t undefined_rmafd = 0;
};

/// Splits the valid model outputs of a revise run into fallback / revision
/// decisions and profiles the inputs behind each. Returns {fallback, revision}.
inline std::pair<FallbackProfile, FallbackProfile> fallback_characterize(
    const MethodRun& run, const std::vector<ForecastInstance>& instances) {
  if (run.mode != EvalMode::revise) throw ValidationError("fallback_characterize: run is not a revise run");
  std::map<std::string, const ForecastInstance*> by_id;
  for (const auto& inst : instances) by_id[inst.instance_id] = &inst;

  struct Acc {
    std::size_t n = 0, gaps = 0, rm = 0, no_events = 0, bad_rm = 0;
    double words = 0.0, gap_sum = 0.0, rm_sum = 0.0;
  } acc[2];
  for (const auto& ex : run.per_example) {
    if (!ex.valid_window || ex.used_evaluator_fallback) continue;
    const auto it = by_id.find(ex.instance_id);
    if (it == by_id.end()) throw ValidationError("fallback_characterize: unknown instance '" + ex.instance_id + "'");
    const auto& inst = *it->second;
    auto& a = acc[ex.is_model_fallback ? 0 : 1];
    ++a.n;
    const auto cs = context_stats(inst.context, inst.forecast_start());
    a.words += static_cast<double>(cs.word_count);
    if (cs.closest_event_gap_days) {
      a.gap_sum += static_cast<double>(*cs.closest_event_gap_days);
      ++a.gaps;
    } else {
      ++a.no_events;
    }
    const auto hist = inst.history_values();
    if (hist.size() >= 2) {
      if (auto r = rmafd(hist)) {
        a.rm_sum += *r;
        ++a.rm;
      } else {
        ++a.bad_rm;
      }
    }
  }
  if (acc[0].n + acc[1].n == 0) throw ValidationError("fallback_characterize: no valid outputs");
  auto profile = [](const Acc& a, bool fb) {
    FallbackProfile p;
    p.is_fallback = fb;
    p.count = a.n;
    p.empty = a.n == 0;
    p.without_events = a.no_events;
    p.undefined_rmafd = a.bad_rm;
    if (a.n) p.mean_context_words = a.words / static_cast<double>(a.n);
    if (a.gaps) p.mean_closest_event_gap_days = a.gap_sum / static_cast<double>(a.gaps);
    if (a.rm) p.mean_rmafd = a.rm_sum / static_cast<double>(a.rm);
    return p;
  };
  return {profile(acc[0], true), profile(acc[1], false)};
}

// ---------------------------------------------------------------------------
// Reports

enum class ReportFormat { csv, markdown };

/// Four significant digits; "" for undefined values.
inline std::string fmt4(std::optional<double> v) {
  if (!v) return "";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", *v);
  return buf;
}

struct ReportNote {
  std::string text;
};

/// Leaderboard text. Columns: method, split, nMAE, nMSE, p50..p99 of nMSE,
/// valid_rate, fallback_rate (model), avg_rank, then eval_fallback_rate, n, undefined.
/// Markdown rows are sorted by avg_rank; notes are appended as a footer.
inline std::string emit_report(const EvalReport& report, ReportFormat format, const std::vector<ReportNote>& notes = {}) {
  std::vector<std::string> header{"method", "split", "nMAE", "nMSE"};
  for (double p : kQuantileLevels) header.push_back("p" + std::to_string(static_cast<int>(std::lround(p * 100))));
  for (const char* h : {"valid_rate", "fallback_rate", "avg_rank", "eval_fallback_rate", "n", "undefined"}) header.push_back(h);

  std::vector<const SplitMetrics*> rows;
  for (const auto& r : report.rows) rows.push_back(&r);
  if (format == ReportFormat::markdown) {
    std::stable_sort(rows.begin(), rows.end(), [](const auto* a, const auto* b) {
      if (a->avg_rank != b->avg_rank) return a->avg_rank < b->avg_rank;
      if (a->split != b->split) return a->split < b->split;
      return a->method_id < b->method_id;
    });
  }
  auto cells = [](const SplitMetrics& m) {
    std::vector<std::string> c{m.method_id, m.split, fmt4(m.mean_nmae), fmt4(m.mean_nmse)};
    for (std::size_t i = 0; i < std::size(kQuantileLevels); ++i) {
      c.push_back(i < m.nmse_quantiles.size() ? fmt4(m.nmse_quantiles[i]) : "");
    }
    c.push_back(fmt4(m.valid_window_rate));
    c.push_back(fmt4(m.model_fallback_rate));
    c.push_back(fmt4(m.avg_rank));
    c.push_back(fmt4(m.evaluator_fallback_rate));
    c.push_back(std::to_string(m.examples));
    c.push_back(std::to_string(m.undefined_metric_count));
    return c;
  };

  std::ostringstream out;
  if (format == ReportFormat::csv) {
    for (std::size_t i = 0; i < header.size(); ++i) out << (i ? "," : "") << header[i];
    out << '\n';
    for (const auto* r : rows) {
      const auto c = cells(*r);
      for (std::size_t i = 0; i < c.size(); ++i) out << (i ? "," : "") << c[i];
      out << '\n';
    }
    return out.str();
  }
  out << '|';
  for (const auto& h : header) out << ' ' << h << " |";
  out << "\n|";
  for (std::size_t i = 0; i < header.size(); ++i) out << (i < 2 ? " --- |" : " ---: |");
  out << '\n';
  for (const auto* r : rows) {
    out << '|';
    for (const auto& c : cells(*r)) out << ' ' << c << " |";
    out << '\n';
  }
  if (!notes.empty()) {
    out << '\n';
    for (const auto& n : notes) out << "> " << n.text << '\n';
  }
  return out.str();
}

/// Footer lines comparing every method against a prior-only reference.
inline std::vector<ReportNote> improvement_notes(const EvalReport& report, const std::string& prior_method) {
  std::vector<ReportNote> notes;
  for (const auto& r : report.rows) {
    if (r.method_id == prior_method) continue;
    const auto* p = report.find(prior_method, r.split);
    if (!p) continue;
    const auto imp = improvement_over_prior(r, *p);
    auto pct = [](std::optional<double> v) {
      if (!v) return std::string("undefined");
      char buf[32];
      std::snprintf(buf, sizeof buf, "%+.2f%%", *v);
      return std::string(buf);
    };
    notes.push_back({r.method_id + " vs " + prior_method + " (" + r.split + "): nMAE " + pct(imp.nmae_pct) +
                     ", nMSE " + pct(imp.nmse_pct)});
  }
  if (!notes.empty()) {
    notes.push_back({"Improvements are computed from unrounded split means; recomputing them from the rounded "
                     "table values can differ in the second decimal."});
  }
  return notes;
}

inline json example_to_json(const ExampleResult& ex, const MethodRun& run) {
  auto opt = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
  return json{{"instance_id", ex.instance_id},
              {"method_id", run.method_id},
              {"mode", std::string(to_string(run.mode))},
              {"forecast", ex.forecast},
              {"mae", ex.metrics.mae},
              {"mse", ex.metrics.mse},
              {"nmae", opt(ex.metrics.nmae)},
              {"nmse", opt(ex.metrics.nmse)},
              {"valid_window", ex.valid_window},
              {"fallbacks", {{"evaluator", ex.used_evaluator_fallback}, {"model", ex.is_model_fallback}}}};
}

/// Reads a per-example dump back into runs (one per method_id, in file order).
inline std::vector<MethodRun> read_per_example(std::istream& in) {
  std::vector<MethodRun> runs;
  std::map<std::string, std::size_t> index;
  detail::for_each_jsonl(in, [&](const json& j, std::size_t lineno) {
    try {
      const auto id = j.at("method_id").get<std::string>();
      auto [it, inserted] = index.emplace(id, runs.size());
      if (inserted) runs.push_back({id, parse_eval_mode(j.at("mode").get<std::string>()), {}});
      ExampleResult ex;
      ex.instance_id = j.at("instance_id").get<std::string>();
      ex.forecast = j.at("forecast").get<std::vector<double>>();
      ex.metrics.mae = j.at("mae").get<double>();
      ex.metrics.mse = j.at("mse").get<double>();
      if (!j.at("nmae").is_null()) ex.metrics.nmae = j["nmae"].get<double>();
      if (!j.at("nmse").is_null()) ex.metrics.nmse = j["nmse"].get<double>();
      ex.metrics.horizon_len = ex.forecast.size();
      ex.valid_window = j.at("valid_window").get<bool>();
      ex.used_evaluator_fallback = j.at("fallbacks").at("evaluator").get<bool>();
      ex.is_model_fallback = j.at("fallbacks").at("model").get<bool>();
      runs[it->second].per_example.push_back(std::move(ex));
    } catch (const json::exception& e) {
      throw ParseError(std::string("bad per-example row: ") + e.what(), lineno);
    }
  });
  return runs;
}

}  // namespace revisebench
