#pragma once

#include <cmath>
#include <cstddef>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "revisebench/core_data.hpp"

namespace revisebench {

struct SeasonalPeriodMap {
  int daily_period = 7;
  int weekly_period = 52;

  int period(Frequency f) const { return f == Frequency::daily ? daily_period : weekly_period; }
};

/// Point accuracy of one forecast. nmae/nmse are empty when the seasonal-naive
/// error sum is zero; such examples are excluded from normalized aggregates.
struct MetricReport {
  double mae = 0.0;
  double mse = 0.0;
  std::optional<double> nmae;
  std::optional<double> nmse;
  std::size_t horizon_len = 0;

  bool normalized_defined() const { return nmae.has_value() && nmse.has_value(); }
};

/// Repeats the last period of the history: forecast[t] = history[T - p + (t mod p)]
/// with p = min(period, T).
inline std::vector<double> seasonal_naive(std::span<const double> history, Frequency frequency, std::size_t horizon,
                                          const SeasonalPeriodMap& periods = {}) {
  if (history.empty()) throw ValidationError("seasonal_naive: empty history");
  const std::size_t T = history.size();
  const std::size_t p = std::min<std::size_t>(static_cast<std::size_t>(std::max(periods.period(frequency), 1)), T);
  std::vector<double> out(horizon);
  for (std::size_t t = 0; t < horizon; ++t) out[t] = history[T - p + (t % p)];
  return out;
}

inline double mean_absolute_error(std::span<const double> forecast, std::span<const double> truth) {
  if (forecast.size() != truth.size() || truth.empty()) {
    throw ValidationError("mean_absolute_error: length mismatch");
  }
  double s = 0.0;
  for (std::size_t t = 0; t < truth.size(); ++t) s += std::abs(truth[t] - forecast[t]);
  return s / static_cast<double>(truth.size());
}

/// Scores a forecast against the instance's realized horizon.
inline MetricReport score(std::span<const double> forecast, const ForecastInstance& instance,
                          const SeasonalPeriodMap& periods = {}) {
  if (!instance.ground_truth) {
    throw ValidationError("score: instance '" + instance.instance_id + "' has no ground truth");
  }
  const auto& y = *instance.ground_truth;
  if (forecast.size() != y.size()) {
    throw ValidationError("score: forecast length " + std::to_string(forecast.size()) + " != horizon " +
                          std::to_string(y.size()) + " for '" + instance.instance_id + "'");
  }
  for (double v : forecast) {
    if (!std::isfinite(v)) throw ValidationError("score: non-finite forecast for '" + instance.instance_id + "'");
  }
  const auto hist = instance.history_values();
  const auto naive = seasonal_naive(hist, instance.frequency, y.size(), periods);

  double abs_sum = 0.0, sq_sum = 0.0, naive_abs = 0.0, naive_sq = 0.0;
  for (std::size_t t = 0; t < y.size(); ++t) {
    const double e = y[t] - forecast[t];
    const double en = y[t] - naive[t];
    abs_sum += std::abs(e);
    sq_sum += e * e;
    naive_abs += std::abs(en);
    naive_sq += en * en;
  }
  MetricReport r;
  r.horizon_len = y.size();
  r.mae = abs_sum / static_cast<double>(y.size());
  r.mse = sq_sum / static_cast<double>(y.size());
  if (naive_abs > 0.0 && naive_sq > 0.0) {
    r.nmae = abs_sum / naive_abs;
    r.nmse = sq_sum / naive_sq;
  }
  return r;
}

enum class PriorKind { seasonal_naive, last_value, mean };

inline std::string_view to_string(PriorKind k) {
  switch (k) {
    case PriorKind::seasonal_naive: return "seasonal_naive";
    case PriorKind::last_value: return "last_value";
    case PriorKind::mean: return "mean";
  }
  return "seasonal_naive";
}

inline PriorKind parse_prior_kind(std::string_view s) {
  if (s == "seasonal_naive") return PriorKind::seasonal_naive;
  if (s == "last_value") return PriorKind::last_value;
  if (s == "mean") return PriorKind::mean;
  throw ConfigError("unknown builtin prior kind '" + std::string(s) + "'");
}

/// Built-in stand-ins for a foundation-model prior.
inline std::vector<double> naive_prior(const ForecastInstance& instance, PriorKind kind,
                                       const SeasonalPeriodMap& periods = {}) {
  const auto hist = instance.history_values();
  if (hist.empty()) throw ValidationError("naive_prior: empty history for '" + instance.instance_id + "'");
  const std::size_t H = instance.horizon();
  switch (kind) {
    case PriorKind::seasonal_naive: return seasonal_naive(hist, instance.frequency, H, periods);
    case PriorKind::last_value: return std::vector<double>(H, hist.back());
    case PriorKind::mean: {
      const double m = std::accumulate(hist.begin(), hist.end(), 0.0) / static_cast<double>(hist.size());
      return std::vector<double>(H, m);
    }
  }
  return {};
}

inline void apply_naive_prior(ForecastInstance& instance, PriorKind kind, const SeasonalPeriodMap& periods = {}) {
  instance.prior = naive_prior(instance, kind, periods);
  instance.prior_source = "builtin:" + std::string(to_string(kind));
}

// ---------------------------------------------------------------------------
// Prior files

struct PriorEntry {
  std::vector<double> forecast;
  std::string prior_source;
};

inline std::map<std::string, PriorEntry> read_prior_file(std::istream& in) {
  std::map<std::string, PriorEntry> priors;
  detail::for_each_jsonl(in, [&](const json& j, std::size_t lineno) {
    try {
      const auto id = j.at("instance_id").get<std::string>();
      PriorEntry e{detail::reals_from_json(j.at("forecast"), "forecast"), j.value("prior_source", std::string{})};
      if (!priors.emplace(id, std::move(e)).second) {
        throw ValidationError("duplicate instance_id '" + id + "' in prior file");
      }
    } catch (const ValidationError& e) {
      throw ValidationError("line " + std::to_string(lineno) + ": " + e.what());
    } catch (const json::exception& e) {
      throw ParseError(std::string("bad prior: ") + e.what(), lineno);
    }
  });
  return priors;
}

inline void write_prior_file(std::ostream& out, const std::vector<ForecastInstance>& instances) {
  for (const auto& inst : instances) {
    if (!inst.prior) continue;
    out << json{{"instance_id", inst.instance_id}, {"forecast", *inst.prior}, {"prior_source", inst.prior_source}}.dump()
        << '\n';
  }
}

struct AttachResult {
  std::size_t joined = 0;
  std::vector<std::string> unmatched;
};

/// Joins precomputed priors onto instances by instance_id. Lengths are checked
/// for every match before any instance is touched.
inline AttachResult attach_priors(std::vector<ForecastInstance>& instances,
                                  const std::map<std::string, PriorEntry>& priors) {
  for (const auto& inst : instances) {
    const auto it = priors.find(inst.instance_id);
    if (it != priors.end() && it->second.forecast.size() != inst.horizon()) {
      throw ValidationError("prior for '" + inst.instance_id + "' has length " +
                            std::to_string(it->second.forecast.size()) + ", expected " +
                            std::to_string(inst.horizon()));
    }
  }
  AttachResult res;
  for (auto& inst : instances) {
    const auto it = priors.find(inst.instance_id);
    if (it == priors.end()) {
      res.unmatched.push_back(inst.instance_id);
      continue;
    }
    inst.prior = it->second.forecast;
    inst.prior_source = it->second.prior_source;
    ++res.joined;
  }
  return res;
}

inline AttachResult attach_priors(std::vector<ForecastInstance>& instances, const std::string& prior_file) {
  auto in = detail::open_input(prior_file);
  return attach_priors(instances, read_prior_file(in));
}

}  // namespace revisebench
