#pragma once

// Domain types for forecasting suites, rolling-window construction,
// chronological/variable splits and the JSON-Lines file formats.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <istream>
#include <optional>
#include <ostream>
#include <regex>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "revisebench/dates.hpp"
#include "revisebench/error.hpp"
#include "revisebench/numeric.hpp"

namespace revisebench {

using json = nlohmann::json;

inline constexpr std::string_view kSuiteSchemaVersion = "1";

enum class Frequency { daily, weekly };

inline std::string_view to_string(Frequency f) { return f == Frequency::daily ? "daily" : "weekly"; }

inline Frequency parse_frequency(std::string_view s) {
  if (s == "daily") return Frequency::daily;
  if (s == "weekly") return Frequency::weekly;
  throw ValidationError("unknown frequency '" + std::string(s) + "'");
}

inline constexpr int step_days(Frequency f) { return f == Frequency::daily ? 1 : 7; }

struct Point {
  Date timestamp;
  double value = 0.0;
  bool operator==(const Point&) const = default;
};

struct ContextEvent {
  std::string date_text;  // may be empty when the date lives inside the description
  std::string description;
  bool operator==(const ContextEvent&) const = default;
};

struct ContextBundle {
  std::string metadata;
  std::string calendar;
  std::string covariates;
  std::vector<ContextEvent> events;
  std::string raw_text;
  bool operator==(const ContextBundle&) const = default;
};

struct TimeSeriesRecord {
  std::string variable_id;
  Frequency frequency = Frequency::daily;
  std::string unit;
  std::vector<Point> points;
  bool operator==(const TimeSeriesRecord&) const = default;
};

/// Records and their contexts, index-aligned.
struct Suite {
  std::vector<TimeSeriesRecord> records;
  std::vector<ContextBundle> contexts;
};

struct WindowSpec {
  int history_len = 96;
  int horizon_len = 12;
  int shift_daily = 12;
  int shift_weekly = 4;

  int shift(Frequency f) const { return f == Frequency::daily ? shift_daily : shift_weekly; }

  void validate() const {
    if (history_len < 1 || horizon_len < 1 || shift_daily < 1 || shift_weekly < 1) {
      throw ConfigError("window spec requires history_len, horizon_len and shifts >= 1");
    }
  }
};

struct ForecastInstance {
  std::string instance_id;
  std::string variable_id;
  Frequency frequency = Frequency::daily;
  std::vector<Point> history;
  ContextBundle context;
  std::vector<Date> horizon_timestamps;
  std::optional<std::vector<double>> ground_truth;
  std::optional<std::vector<double>> prior;
  std::string prior_source;

  std::size_t horizon() const { return horizon_timestamps.size(); }
  Date forecast_start() const { return horizon_timestamps.front(); }

  std::vector<double> history_values() const {
    std::vector<double> v;
    v.reserve(history.size());
    for (const auto& p : history) v.push_back(p.value);
    return v;
  }
};

enum class Split { post_training, id_eval, ood_eval, dropped };

inline std::string_view to_string(Split s) {
  switch (s) {
    case Split::post_training: return "post_training";
    case Split::id_eval: return "id_eval";
    case Split::ood_eval: return "ood_eval";
    case Split::dropped: return "dropped";
  }
  return "dropped";
}

struct SplitAssignment {
  Date cutoff = Date::from_ymd(2025, 1, 30);
  std::set<std::string> id_variables;
  std::set<std::string> ood_variables;

  void validate() const {
    for (const auto& v : id_variables) {
      if (ood_variables.count(v)) {
        throw ConfigError("variable '" + v + "' is listed as both in-domain and out-of-domain");
      }
    }
  }
};

// ---------------------------------------------------------------------------
// Context text

/// Parses an event date either from an ISO prefix ("2024-06-02") or from the
/// first "Month D, YYYY" phrase in the text ("On June 2, 2024, ...").
inline std::optional<Date> parse_event_date(std::string_view text) {
  const auto t = detail::trim(text);
  if (t.size() >= 10) {
    if (auto d = try_parse_date(t.substr(0, 10))) return d;
  }
  static const std::regex prose(
      R"((January|February|March|April|May|June|July|August|September|October|November|December|Jan|Feb|Mar|Apr|Jun|Jul|Aug|Sep|Sept|Oct|Nov|Dec)\.?\s+(\d{1,2}),\s*(\d{4}))");
  std::match_results<std::string_view::const_iterator> m;
  if (!std::regex_search(t.begin(), t.end(), m, prose)) return std::nullopt;
  static constexpr std::string_view months[] = {"Jan", "Feb", "Mar", "Apr", "May", "Jun",
                                                "Jul", "Aug", "Sep", "Oct", "Nov", "Dec"};
  const std::string name = m[1].str();
  unsigned month = 0;
  for (unsigned i = 0; i < 12; ++i) {
    if (std::string_view(name).substr(0, 3) == months[i]) month = i + 1;
  }
  const int day = std::stoi(m[2].str());
  const int year = std::stoi(m[3].str());
  const std::chrono::year_month_day ymd{std::chrono::year{year}, std::chrono::month{month},
                                        std::chrono::day{static_cast<unsigned>(day)}};
  if (!ymd.ok()) return std::nullopt;
  return Date(std::chrono::sys_days{ymd}.time_since_epoch().count());
}

inline std::optional<Date> event_date(const ContextEvent& e) {
  if (!e.date_text.empty()) {
    if (auto d = parse_event_date(e.date_text)) return d;
  }
  return parse_event_date(e.description);
}

/// Canonical text for the <context> block.
inline std::string serialize_context(const ContextBundle& c) {
  std::string out;
  out += "Metadata: " + c.metadata + "\n";
  out += "Calendar: " + c.calendar + "\n";
  out += "Covariates: " + c.covariates + "\n";
  out += "Recent events:";
  if (c.events.empty()) {
    out += " none";
  }
  for (const auto& e : c.events) {
    out += "\n- ";
    if (!e.date_text.empty()) out += e.date_text + ": ";
    out += e.description;
  }
  return out;
}

inline ContextBundle make_context(std::string metadata, std::string calendar, std::string covariates,
                                  std::vector<ContextEvent> events) {
  ContextBundle c{std::move(metadata), std::move(calendar), std::move(covariates), std::move(events), {}};
  c.raw_text = serialize_context(c);
  return c;
}

/// Recovers the structured fields from a serialized <context> block. Text that
/// does not follow the canonical layout is kept verbatim in raw_text; event
/// lines are any "- ..." lines after a "Recent events:" header.
inline ContextBundle parse_context_text(std::string_view raw) {
  ContextBundle c;
  c.raw_text = std::string(raw);
  std::istringstream in{std::string(raw)};
  std::string line;
  bool in_events = false;
  auto strip_prefix = [](std::string_view l, std::string_view p, std::string& out) {
    if (l.substr(0, p.size()) != p) return false;
    out = std::string(detail::trim(l.substr(p.size())));
    return true;
  };
  while (std::getline(in, line)) {
    const std::string_view l = detail::trim(line);
    if (strip_prefix(l, "Metadata:", c.metadata) || strip_prefix(l, "Calendar:", c.calendar) ||
        strip_prefix(l, "Covariates:", c.covariates)) {
      in_events = false;
      continue;
    }
    if (l.substr(0, 14) == "Recent events:") {
      in_events = true;
      continue;
    }
    if (in_events && l.substr(0, 2) == "- ") {
      const auto body = l.substr(2);
      ContextEvent ev;
      const auto colon = body.find(": ");
      if (colon != std::string_view::npos && try_parse_date(body.substr(0, colon))) {
        ev.date_text = std::string(body.substr(0, colon));
        ev.description = std::string(body.substr(colon + 2));
      } else {
        ev.description = std::string(body);
      }
      c.events.push_back(std::move(ev));
    }
  }
  return c;
}

// ---------------------------------------------------------------------------
// JSON helpers

namespace detail {

inline json points_to_json(const std::vector<Point>& pts) {
  json arr = json::array();
  for (const auto& p : pts) arr.push_back(json::array({p.timestamp.iso(), p.value}));
  return arr;
}

inline std::vector<Point> points_from_json(const json& j) {
  if (!j.is_array()) throw ValidationError("points must be an array of [timestamp, value] pairs");
  std::vector<Point> pts;
  pts.reserve(j.size());
  for (const auto& item : j) {
    if (!item.is_array() || item.size() != 2 || !item[0].is_string()) {
      throw ValidationError("point must be a [timestamp, value] pair");
    }
    if (!item[1].is_number()) {
      throw ValidationError("missing or non-numeric value at " + item[0].get<std::string>());
    }
    const double v = item[1].get<double>();
    if (!std::isfinite(v)) throw ValidationError("non-finite value at " + item[0].get<std::string>());
    pts.push_back({parse_date(item[0].get<std::string>()), v});
  }
  return pts;
}

inline std::vector<double> reals_from_json(const json& j, std::string_view what) {
  if (!j.is_array()) throw ValidationError(std::string(what) + " must be an array of reals");
  std::vector<double> out;
  out.reserve(j.size());
  for (const auto& v : j) {
    if (!v.is_number()) throw ValidationError(std::string(what) + " contains a non-numeric entry");
    const double d = v.get<double>();
    if (!std::isfinite(d)) throw ValidationError(std::string(what) + " contains a non-finite entry");
    out.push_back(d);
  }
  return out;
}

template <class Fn>
void for_each_jsonl(std::istream& in, Fn&& fn) {
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (detail::trim(line).empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw ParseError(std::string("malformed JSON: ") + e.what(), lineno);
    }
    fn(j, lineno);
  }
}

inline std::ifstream open_input(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open '" + path + "'");
  return in;
}

}  // namespace detail

/// Checks ordering, spacing and finiteness of a record.
inline void validate_record(const TimeSeriesRecord& r) {
  if (r.variable_id.empty()) throw ValidationError("record without variable_id");
  const int step = step_days(r.frequency);
  for (std::size_t i = 0; i < r.points.size(); ++i) {
    if (!std::isfinite(r.points[i].value)) {
      throw ValidationError("record '" + r.variable_id + "': non-finite value at index " + std::to_string(i));
    }
    if (i == 0) continue;
    const auto gap = r.points[i].timestamp - r.points[i - 1].timestamp;
    if (gap <= 0) {
      throw ValidationError("record '" + r.variable_id + "': timestamps not strictly increasing at index " +
                            std::to_string(i));
    }
    if (gap != step) {
      throw ValidationError("record '" + r.variable_id + "': spacing of " + std::to_string(gap) +
                            " days at index " + std::to_string(i) + " does not match " +
                            std::string(to_string(r.frequency)) + " frequency");
    }
  }
}

inline json suite_line_to_json(const TimeSeriesRecord& r, const ContextBundle& c) {
  json events = json::array();
  for (const auto& e : c.events) events.push_back(json::array({e.date_text, e.description}));
  return json{{"variable_id", r.variable_id},
              {"frequency", std::string(to_string(r.frequency))},
              {"unit", r.unit},
              {"points", detail::points_to_json(r.points)},
              {"context",
               {{"metadata", c.metadata},
                {"calendar", c.calendar},
                {"covariates", c.covariates},
                {"events", std::move(events)}}}};
}

inline void write_suite(std::ostream& out, const Suite& suite) {
  for (std::size_t i = 0; i < suite.records.size(); ++i) {
    out << suite_line_to_json(suite.records[i], suite.contexts.at(i)).dump() << '\n';
  }
}

/// Reads a suite from a stream. Errors carry the 1-based line number.
inline Suite read_suite(std::istream& in, std::string_view schema_version = kSuiteSchemaVersion) {
  if (schema_version != kSuiteSchemaVersion) {
    throw ConfigError("unsupported suite schema version '" + std::string(schema_version) + "'");
  }
  Suite suite;
  detail::for_each_jsonl(in, [&](const json& j, std::size_t lineno) {
    try {
      TimeSeriesRecord r;
      r.variable_id = j.at("variable_id").get<std::string>();
      r.frequency = parse_frequency(j.at("frequency").get<std::string>());
      r.unit = j.value("unit", std::string{});
      r.points = detail::points_from_json(j.at("points"));
      validate_record(r);

      ContextBundle c;
      if (j.contains("context")) {
        const auto& cj = j.at("context");
        c.metadata = cj.value("metadata", std::string{});
        c.calendar = cj.value("calendar", std::string{});
        c.covariates = cj.value("covariates", std::string{});
        for (const auto& e : cj.value("events", json::array())) {
          if (!e.is_array() || e.size() != 2) throw ValidationError("event must be a [date, text] pair");
          ContextEvent ev{e[0].get<std::string>(), e[1].get<std::string>()};
          if (!event_date(ev)) throw ValidationError("unparseable event date '" + ev.date_text + "'");
          c.events.push_back(std::move(ev));
        }
      }
      c.raw_text = serialize_context(c);
      suite.records.push_back(std::move(r));
      suite.contexts.push_back(std::move(c));
    } catch (const ValidationError& e) {
      throw ValidationError("line " + std::to_string(lineno) + ": " + e.what());
    } catch (const ParseError& e) {
      throw ParseError(e.what(), lineno);
    } catch (const json::exception& e) {
      throw ParseError(std::string("bad record: ") + e.what(), lineno);
    }
  });
  return suite;
}

inline Suite ingest_suite(const std::string& path, std::string_view schema_version = kSuiteSchemaVersion) {
  auto in = detail::open_input(path);
  return read_suite(in, schema_version);
}

// ---------------------------------------------------------------------------
// Windows and splits

struct WindowResult {
  std::vector<ForecastInstance> instances;
  bool too_short = false;
};

/// Number of full windows in a series of length len.
inline std::size_t window_count(std::size_t len, const WindowSpec& spec, Frequency f) {
  const auto need = static_cast<std::size_t>(spec.history_len + spec.horizon_len);
  if (len < need) return 0;
  return (len - need) / static_cast<std::size_t>(spec.shift(f)) + 1;
}

/// Rolling windows at offsets 0, s, 2s, ... Events dated on or after the first
/// horizon timestamp are removed from each instance's context.
inline WindowResult make_windows(const TimeSeriesRecord& record, const ContextBundle& context,
                                 const WindowSpec& spec) {
  spec.validate();
  WindowResult result;
  const auto T = static_cast<std::size_t>(spec.history_len);
  const auto H = static_cast<std::size_t>(spec.horizon_len);
  const auto s = static_cast<std::size_t>(spec.shift(record.frequency));
  if (record.points.size() < T + H) {
    result.too_short = true;
    return result;
  }
  for (std::size_t o = 0; o + T + H <= record.points.size(); o += s) {
    ForecastInstance inst;
    inst.variable_id = record.variable_id;
    inst.frequency = record.frequency;
    inst.history.assign(record.points.begin() + static_cast<std::ptrdiff_t>(o),
                        record.points.begin() + static_cast<std::ptrdiff_t>(o + T));
    std::vector<double> truth;
    for (std::size_t t = o + T; t < o + T + H; ++t) {
      inst.horizon_timestamps.push_back(record.points[t].timestamp);
      truth.push_back(record.points[t].value);
    }
    inst.ground_truth = std::move(truth);
    inst.instance_id = record.variable_id + "@" + inst.forecast_start().iso();

    ContextBundle ctx = context;
    std::erase_if(ctx.events, [&](const ContextEvent& e) {
      const auto d = event_date(e);
      return !d || *d >= inst.forecast_start();
    });
    ctx.raw_text = serialize_context(ctx);
    inst.context = std::move(ctx);
    result.instances.push_back(std::move(inst));
  }
  return result;
}

inline Split assign_split(const ForecastInstance& inst, const SplitAssignment& a) {
  const bool is_id = a.id_variables.count(inst.variable_id) > 0;
  const bool is_ood = a.ood_variables.count(inst.variable_id) > 0;
  const Date first = inst.horizon_timestamps.front();
  const Date last = inst.horizon_timestamps.back();
  if (last < a.cutoff && is_id) return Split::post_training;
  if (first > a.cutoff && is_id) return Split::id_eval;
  if (first > a.cutoff && is_ood) return Split::ood_eval;
  return Split::dropped;
}

// ---------------------------------------------------------------------------
// Instance files

inline json instance_to_json(const ForecastInstance& inst) {
  json hz = json::array();
  for (const auto& d : inst.horizon_timestamps) hz.push_back(d.iso());
  json j{{"instance_id", inst.instance_id},
         {"variable_id", inst.variable_id},
         {"frequency", std::string(to_string(inst.frequency))},
         {"history", detail::points_to_json(inst.history)},
         {"context_text", inst.context.raw_text},
         {"horizon_timestamps", std::move(hz)}};
  if (inst.ground_truth) j["ground_truth"] = *inst.ground_truth;
  if (inst.prior) {
    j["prior"] = *inst.prior;
    j["prior_source"] = inst.prior_source;
  }
  return j;
}

inline void validate_instance(const ForecastInstance& inst) {
  const auto& id = inst.instance_id;
  if (inst.history.empty()) throw ValidationError("instance '" + id + "': empty history");
  if (inst.horizon_timestamps.empty()) throw ValidationError("instance '" + id + "': empty horizon");
  const int step = step_days(inst.frequency);
  for (std::size_t i = 1; i < inst.horizon_timestamps.size(); ++i) {
    if (inst.horizon_timestamps[i] - inst.horizon_timestamps[i - 1] != step) {
      throw ValidationError("instance '" + id + "': horizon timestamps are not evenly spaced");
    }
  }
  if (!(inst.horizon_timestamps.front() > inst.history.back().timestamp)) {
    throw ValidationError("instance '" + id + "': horizon does not follow history");
  }
  if (inst.ground_truth && inst.ground_truth->size() != inst.horizon()) {
    throw ValidationError("instance '" + id + "': ground_truth length differs from horizon");
  }
  if (inst.prior && inst.prior->size() != inst.horizon()) {
    throw ValidationError("instance '" + id + "': prior length differs from horizon");
  }
}

inline ForecastInstance instance_from_json(const json& j) {
  ForecastInstance inst;
  inst.instance_id = j.at("instance_id").get<std::string>();
  inst.variable_id = j.at("variable_id").get<std::string>();
  inst.frequency = parse_frequency(j.at("frequency").get<std::string>());
  inst.history = detail::points_from_json(j.at("history"));
  inst.context = parse_context_text(j.value("context_text", std::string{}));
  for (const auto& d : j.at("horizon_timestamps")) inst.horizon_timestamps.push_back(parse_date(d.get<std::string>()));
  if (j.contains("ground_truth") && !j["ground_truth"].is_null()) {
    inst.ground_truth = detail::reals_from_json(j["ground_truth"], "ground_truth");
  }
  if (j.contains("prior") && !j["prior"].is_null()) {
    inst.prior = detail::reals_from_json(j["prior"], "prior");
    inst.prior_source = j.value("prior_source", std::string{});
  }
  validate_instance(inst);
  return inst;
}

inline std::vector<ForecastInstance> read_instances(std::istream& in) {
  std::vector<ForecastInstance> out;
  detail::for_each_jsonl(in, [&](const json& j, std::size_t lineno) {
    try {
      out.push_back(instance_from_json(j));
    } catch (const ValidationError& e) {
      throw ValidationError("line " + std::to_string(lineno) + ": " + e.what());
    } catch (const ParseError& e) {
      throw ParseError(e.what(), lineno);
    } catch (const json::exception& e) {
      throw ParseError(std::string("bad instance: ") + e.what(), lineno);
    }
  });
  return out;
}

inline std::vector<ForecastInstance> read_instances(const std::string& path) {
  auto in = detail::open_input(path);
  return read_instances(in);
}

inline void write_instances(std::ostream& out, const std::vector<ForecastInstance>& instances) {
  for (const auto& inst : instances) out << instance_to_json(inst).dump() << '\n';
}

}  // namespace revisebench
