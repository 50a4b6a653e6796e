#pragma once

// Prompt rendering for the direct and revising modes, model-output parsing,
// fallback detection and the context/history statistics used to characterise
// fallback decisions.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <optional>
#include <sstream>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "revisebench/core_data.hpp"
#include "revisebench/numeric.hpp"

namespace revisebench {

enum class PromptMode { direct, revise };

inline std::string_view to_string(PromptMode m) { return m == PromptMode::direct ? "direct" : "revise"; }

inline constexpr std::string_view kDirectTemplate = R"(You are an expert forecaster.

Here is some context about the task. Please consider this information when making the forecast:
<context>
{context}
</context>

Here is the historical time series in (timestamp, value) format:
<history>
{history}
</history>

Requested timestamps:
{requested_timestamps}

Please produce the forecast for the requested timestamps.
Return the forecast in (timestamp, value) format between <forecast> and </forecast> tags.
Do not include any other information outside the tags.

Example format:
<forecast>
(2024-01-01 00:00:00, 123.45)
(2024-01-02 00:00:00, 125.67)
</forecast>
)";

inline constexpr std::string_view kReviseTemplate =
    R"(You are an expert forecaster tasked with refining a statistical forecast by applying contextual reasoning.

Follow this workflow:
1. Study the contextual information and historical values to identify relevant drivers, constraints, or anomalies.
2. Compare the initial forecast against these signals and decide whether the context supports a reliable change.
3. Summarize your reasoning inside <analysis></analysis>, explaining any adjustments or why the values should stay the same.
4. Output the final forecast inside <forecast></forecast> using (timestamp, value) lines in the same order as the requested timestamps.

<context>
{context}
</context>

<history>
{history}
</history>

<initial_forecast>
{initial_forecast}
</initial_forecast>

Requested timestamps:
{requested_timestamps}

Example format:
<analysis>
- Context driver A points to stronger demand in the first half of the horizon.
- I adjust the early timestamps upward while keeping later timestamps close to the initial forecast.
- If the context is weak or conflicting, I keep the initial forecast unchanged.
</analysis>
<forecast>
(2024-01-01 00:00:00, 123.45)
(2024-01-02 00:00:00, 125.67)
</forecast>
)";

struct TemplateSet {
  std::string direct{kDirectTemplate};
  std::string revise{kReviseTemplate};

  const std::string& get(PromptMode m) const { return m == PromptMode::direct ? direct : revise; }

  /// Loads direct.txt / revise.txt from a directory; missing files keep the defaults.
  static TemplateSet load(const std::string& dir) {
    TemplateSet t;
    auto slurp = [](const std::string& path, std::string& out) {
      std::ifstream in(path, std::ios::binary);
      if (!in) return;
      std::ostringstream ss;
      ss << in.rdbuf();
      out = ss.str();
    };
    slurp(dir + "/direct.txt", t.direct);
    slurp(dir + "/revise.txt", t.revise);
    return t;
  }
};

struct PromptRender {
  PromptMode mode = PromptMode::direct;
  std::string text;
  std::vector<Date> requested_timestamps;
  std::string instance_id;
};

/// "(YYYY-MM-DD 00:00:00, value)"
inline std::string format_point(Date ts, double value) {
  return "(" + ts.timestamp() + ", " + format_number(value) + ")";
}

inline std::string format_points(const std::vector<Date>& ts, std::span<const double> values) {
  std::string out;
  for (std::size_t i = 0; i < ts.size(); ++i) {
    if (i) out += '\n';
    out += format_point(ts[i], values[i]);
  }
  return out;
}

/// Single-pass substitution of {name} slots; substituted text is never re-scanned.
inline std::string fill_template(std::string_view tmpl, const std::vector<std::pair<std::string_view, std::string>>& slots) {
  std::string out;
  out.reserve(tmpl.size() + 1024);
  std::size_t i = 0;
  while (i < tmpl.size()) {
    if (tmpl[i] == '{') {
      const auto close = tmpl.find('}', i);
      if (close != std::string_view::npos) {
        const auto name = tmpl.substr(i + 1, close - i - 1);
        const auto it = std::find_if(slots.begin(), slots.end(), [&](const auto& s) { return s.first == name; });
        if (it != slots.end()) {
          out += it->second;
          i = close + 1;
          continue;
        }
      }
    }
    out += tmpl[i++];
  }
  return out;
}

inline PromptRender render_prompt(const ForecastInstance& instance, PromptMode mode,
                                  const TemplateSet& templates = {}) {
  if (mode == PromptMode::revise && !instance.prior) {
    throw ValidationError("render_prompt: revise mode requires a prior for '" + instance.instance_id + "'");
  }
  std::string history;
  for (std::size_t i = 0; i < instance.history.size(); ++i) {
    if (i) history += '\n';
    history += format_point(instance.history[i].timestamp, instance.history[i].value);
  }
  std::string requested;
  for (std::size_t i = 0; i < instance.horizon_timestamps.size(); ++i) {
    if (i) requested += '\n';
    requested += instance.horizon_timestamps[i].timestamp();
  }
  std::vector<std::pair<std::string_view, std::string>> slots{
      {"context", instance.context.raw_text}, {"history", std::move(history)}, {"requested_timestamps", requested}};
  if (mode == PromptMode::revise) {
    slots.emplace_back("initial_forecast", format_points(instance.horizon_timestamps, *instance.prior));
  }
  return PromptRender{mode, fill_template(templates.get(mode), slots), instance.horizon_timestamps,
                      instance.instance_id};
}

// ---------------------------------------------------------------------------
// Output parsing

enum class ParseStatus { ok, missing_forecast, malformed_line, count_short, timestamp_mismatch };

inline std::string_view to_string(ParseStatus s) {
  switch (s) {
    case ParseStatus::ok: return "ok";
    case ParseStatus::missing_forecast: return "missing_forecast";
    case ParseStatus::malformed_line: return "malformed_line";
    case ParseStatus::count_short: return "count_short";
    case ParseStatus::timestamp_mismatch: return "timestamp_mismatch";
  }
  return "ok";
}

inline ParseStatus parse_status_from_string(std::string_view s) {
  for (auto st : {ParseStatus::ok, ParseStatus::missing_forecast, ParseStatus::malformed_line, ParseStatus::count_short,
                  ParseStatus::timestamp_mismatch}) {
    if (to_string(st) == s) return st;
  }
  throw ParseError("unknown parse status '" + std::string(s) + "'");
}

struct ParsedOutput {
  std::optional<std::string> analysis;
  /// When valid_window, exactly H points carrying the requested timestamps.
  /// Otherwise whatever points could be read from the last forecast block.
  std::optional<std::vector<Point>> forecast;
  bool valid_window = false;
  ParseStatus parse_status = ParseStatus::missing_forecast;
  std::size_t parsed_points = 0;
  std::size_t skipped_lines = 0;

  std::vector<double> values() const {
    std::vector<double> v;
    if (forecast) {
      for (const auto& p : *forecast) v.push_back(p.value);
    }
    return v;
  }
};

struct ParseOptions {
  /// Reject (instead of positionally aligning) outputs whose timestamps differ
  /// from the requested ones.
  bool strict_timestamps = false;
};

namespace detail {

/// Content of the last complete <tag>...</tag> block.
inline std::optional<std::string_view> last_block(std::string_view text, std::string_view tag) {
  const std::string open = "<" + std::string(tag) + ">";
  const std::string close = "</" + std::string(tag) + ">";
  std::optional<std::string_view> found;
  std::size_t pos = 0;
  while ((pos = text.find(open, pos)) != std::string_view::npos) {
    const auto body = pos + open.size();
    const auto end = text.find(close, body);
    if (end == std::string_view::npos) break;
    found = text.substr(body, end - body);
    pos = end + close.size();
  }
  return found;
}

inline std::optional<Point> parse_point_line(std::string_view line) {
  line = trim(line);
  if (line.size() < 5 || line.front() != '(' || line.back() != ')') return std::nullopt;
  const auto inner = line.substr(1, line.size() - 2);
  const auto comma = inner.rfind(',');
  if (comma == std::string_view::npos) return std::nullopt;
  const auto ts = try_parse_date(inner.substr(0, comma));
  if (!ts) return std::nullopt;
  const auto v = parse_number(trim(inner.substr(comma + 1)));
  if (!v) return std::nullopt;
  return Point{*ts, *v};
}

}  // namespace detail

/// Total parser: never throws on arbitrary input; every failure lands in parse_status.
inline ParsedOutput parse_output(std::string_view raw, const std::vector<Date>& requested,
                                 const ParseOptions& options = {}) {
  ParsedOutput out;
  if (auto a = detail::last_block(raw, "analysis")) out.analysis = std::string(detail::trim(*a));

  const auto block = detail::last_block(raw, "forecast");
  if (!block) {
    out.parse_status = ParseStatus::missing_forecast;
    return out;
  }
  std::vector<Point> points;
  std::size_t pos = 0;
  while (pos <= block->size()) {
    auto nl = block->find('\n', pos);
    if (nl == std::string_view::npos) nl = block->size();
    const auto line = detail::trim(block->substr(pos, nl - pos));
    pos = nl + 1;
    if (line.empty()) continue;
    if (auto p = detail::parse_point_line(line)) {
      points.push_back(*p);
    } else {
      ++out.skipped_lines;
    }
  }
  out.parsed_points = points.size();
  const std::size_t H = requested.size();
  if (points.size() < H || H == 0) {
    out.parse_status = out.skipped_lines ? ParseStatus::malformed_line : ParseStatus::count_short;
    out.forecast = std::move(points);
    return out;
  }
  points.resize(H);
  bool mismatch = false;
  for (std::size_t t = 0; t < H; ++t) {
    if (points[t].timestamp != requested[t]) mismatch = true;
    points[t].timestamp = requested[t];
  }
  out.forecast = std::move(points);
  if (mismatch) {
    out.parse_status = ParseStatus::timestamp_mismatch;
    out.valid_window = !options.strict_timestamps;
  } else {
    out.parse_status = ParseStatus::ok;
    out.valid_window = true;
  }
  return out;
}

/// Canonical assistant response plus the character spans of its two parts.
/// The analysis span is [0, forecast_begin) and the forecast span runs to the
/// end, so together they cover the whole supervised response.
struct SerializedResponse {
  std::string text;
  std::pair<std::size_t, std::size_t> analysis_span;
  std::pair<std::size_t, std::size_t> forecast_span;
};

inline SerializedResponse serialize_response(std::string_view analysis, const std::vector<Date>& timestamps,
                                             std::span<const double> forecast) {
  SerializedResponse r;
  r.text = "<analysis>\n" + std::string(analysis) + "\n</analysis>\n";
  const auto split = r.text.size();
  r.text += "<forecast>\n" + format_points(timestamps, forecast) + "\n</forecast>";
  r.analysis_span = {0, split};
  r.forecast_span = {split, r.text.size()};
  return r;
}

/// True iff every forecast point equals the prior within rel_tol * max(1, |prior|).
inline bool detect_fallback(const ParsedOutput& parsed, std::span<const double> prior, double rel_tol = 1e-9) {
  if (!parsed.valid_window || !parsed.forecast) {
    throw ValidationError("detect_fallback: output has no valid forecast window");
  }
  const auto& f = *parsed.forecast;
  if (f.size() != prior.size()) throw ValidationError("detect_fallback: forecast and prior lengths differ");
  for (std::size_t t = 0; t < f.size(); ++t) {
    if (std::abs(f[t].value - prior[t]) > rel_tol * std::max(1.0, std::abs(prior[t]))) return false;
  }
  return true;
}

// ---------------------------------------------------------------------------
// Context and history statistics

struct ContextStats {
  std::size_t word_count = 0;
  std::optional<std::int64_t> closest_event_gap_days;
  std::size_t skipped_events = 0;
};

inline std::size_t word_count(std::string_view text) {
  std::istringstream in{std::string(text)};
  std::size_t n = 0;
  std::string w;
  while (in >> w) ++n;
  return n;
}

inline ContextStats context_stats(const ContextBundle& context, Date forecast_start) {
  ContextStats s;
  s.word_count = word_count(context.raw_text);
  for (const auto& e : context.events) {
    const auto d = event_date(e);
    if (!d) {
      ++s.skipped_events;
      continue;
    }
    const auto gap = std::abs(*d - forecast_start);
    if (!s.closest_event_gap_days || gap < *s.closest_event_gap_days) s.closest_event_gap_days = gap;
  }
  return s;
}

/// Relative mean absolute first difference. Empty when the mean level is zero
/// but the series moves; 0 for an all-zero series.
inline std::optional<double> rmafd(std::span<const double> history) {
  if (history.size() < 2) throw ValidationError("rmafd: need at least two points");
  const auto T = static_cast<double>(history.size());
  double diff = 0.0, level = 0.0;
  for (std::size_t t = 1; t < history.size(); ++t) diff += std::abs(history[t] - history[t - 1]);
  for (double x : history) level += std::abs(x);
  const double num = diff / (T - 1.0);
  const double den = level / T;
  if (den == 0.0) {
    if (num == 0.0) return 0.0;
    return std::nullopt;
  }
  return num / den;
}

}  // namespace revisebench
