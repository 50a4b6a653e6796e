#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include "builders.hpp"
#include "revisebench/prompt_io.hpp"

using namespace revisebench;
using revisebench::test_support::make_instance;

namespace {

std::size_t count_lines(std::string_view s) {
  std::size_t n = 0;
  std::size_t pos = 0;
  while (pos < s.size()) {
    auto nl = s.find('\n', pos);
    if (nl == std::string_view::npos) nl = s.size();
    if (nl > pos) ++n;
    pos = nl + 1;
  }
  return n;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

ForecastInstance sample_instance() {
  auto inst = make_instance({10, 11.5, 12, 13.25}, std::vector<double>{14, 15, 16}, std::vector<double>{13, 13.5, 14});
  inst.context = make_context("Sales", "Holidays", "Price", {{"2024-01-02", "OPEC extends cuts"}});
  return inst;
}

}  // namespace

TEST(Templates, AssetFilesMatchEmbeddedDefaults) {
  const std::string dir = std::string(REVISEBENCH_ASSET_DIR) + "/templates";
  EXPECT_EQ(slurp(dir + "/direct.txt"), std::string(kDirectTemplate));
  EXPECT_EQ(slurp(dir + "/revise.txt"), std::string(kReviseTemplate));
  const auto loaded = TemplateSet::load(dir);
  EXPECT_EQ(loaded.direct, std::string(kDirectTemplate));
}

TEST(Render, DirectAndReviseStructure) {
  const auto inst = sample_instance();
  const auto direct = render_prompt(inst, PromptMode::direct);
  EXPECT_NE(direct.text.find("<history>"), std::string::npos);
  EXPECT_EQ(direct.text.find("<initial_forecast>"), std::string::npos);
  EXPECT_NE(direct.text.find("(2024-01-02 00:00:00, 11.5)"), std::string::npos);
  EXPECT_NE(direct.text.find("OPEC extends cuts"), std::string::npos);

  const auto revise = render_prompt(inst, PromptMode::revise);
  const auto block = detail::last_block(revise.text, "initial_forecast");
  ASSERT_TRUE(block.has_value());
  EXPECT_EQ(count_lines(*block), inst.horizon());
  EXPECT_EQ(render_prompt(inst, PromptMode::revise).text, revise.text);
  EXPECT_EQ(revise.requested_timestamps, inst.horizon_timestamps);
  // no slot placeholder survives
  EXPECT_EQ(revise.text.find("{history}"), std::string::npos);
  EXPECT_EQ(revise.text.find("{initial_forecast}"), std::string::npos);
}

TEST(Render, ReviseWithoutPriorFails) {
  auto inst = sample_instance();
  inst.prior.reset();
  EXPECT_THROW(render_prompt(inst, PromptMode::revise), ValidationError);
}

TEST(Render, SlotValuesAreNotReexpanded) {
  auto inst = sample_instance();
  inst.context = make_context("{history} literally", "", "", {});
  const auto p = render_prompt(inst, PromptMode::direct);
  EXPECT_NE(p.text.find("{history} literally"), std::string::npos);
}

TEST(Parse, WellFormed) {
  const auto inst = sample_instance();
  const auto resp = serialize_response("- keep", inst.horizon_timestamps, std::vector<double>{1, 2, 3});
  const auto p = parse_output(resp.text, inst.horizon_timestamps);
  EXPECT_EQ(p.parse_status, ParseStatus::ok);
  EXPECT_TRUE(p.valid_window);
  EXPECT_EQ(p.values(), (std::vector<double>{1, 2, 3}));
  EXPECT_EQ(*p.analysis, "- keep");
}

TEST(Parse, MissingCloseTag) {
  const auto inst = sample_instance();
  const auto p = parse_output("<forecast>\n(2024-01-05 00:00:00, 1)\n(2024-01-06 00:00:00, 2)\n(2024-01-07 00:00:00, 3)\n",
                              inst.horizon_timestamps);
  EXPECT_EQ(p.parse_status, ParseStatus::missing_forecast);
  EXPECT_FALSE(p.valid_window);
}

TEST(Parse, ExtraLinesTruncated) {
  const auto inst = sample_instance();
  std::vector<Date> ts = inst.horizon_timestamps;
  ts.push_back(ts.back() + 1);
  ts.push_back(ts.back() + 1);
  const auto resp = serialize_response("a", ts, std::vector<double>{1, 2, 3, 4, 5});
  const auto p = parse_output(resp.text, inst.horizon_timestamps);
  EXPECT_TRUE(p.valid_window);
  EXPECT_EQ(p.values(), (std::vector<double>{1, 2, 3}));
}

TEST(Parse, ShortAndMalformed) {
  const auto inst = sample_instance();
  auto short_one = parse_output("<forecast>\n(2024-01-05 00:00:00, 1)\n</forecast>", inst.horizon_timestamps);
  EXPECT_EQ(short_one.parse_status, ParseStatus::count_short);
  EXPECT_FALSE(short_one.valid_window);
  auto bad = parse_output("<forecast>\n(2024-01-05 00:00:00, x)\n(2024-01-06 00:00:00, 2)\n</forecast>",
                          inst.horizon_timestamps);
  EXPECT_EQ(bad.parse_status, ParseStatus::malformed_line);
  // a malformed line is skipped when enough good lines remain
  auto skipped = parse_output(
      "<forecast>\nnoise\n(2024-01-05 00:00:00, 1)\n(2024-01-06 00:00:00, 2)\n(2024-01-07 00:00:00, 3)\n</forecast>",
      inst.horizon_timestamps);
  EXPECT_TRUE(skipped.valid_window);
  EXPECT_EQ(skipped.skipped_lines, 1u);
}

TEST(Parse, TimestampMismatchAlignsByPosition) {
  const auto inst = sample_instance();
  const std::string raw =
      "<forecast>\n(2025-01-01 00:00:00, 1)\n(2025-01-02 00:00:00, 2)\n(2025-01-03 00:00:00, 3)\n</forecast>";
  const auto p = parse_output(raw, inst.horizon_timestamps);
  EXPECT_EQ(p.parse_status, ParseStatus::timestamp_mismatch);
  EXPECT_TRUE(p.valid_window);
  EXPECT_EQ((*p.forecast)[0].timestamp, inst.horizon_timestamps[0]);
  EXPECT_FALSE(parse_output(raw, inst.horizon_timestamps, {true}).valid_window);
}

TEST(Parse, LastCompleteBlockWins) {
  const auto inst = sample_instance();
  const auto a = serialize_response("x", inst.horizon_timestamps, std::vector<double>{1, 1, 1}).text;
  const auto b = serialize_response("y", inst.horizon_timestamps, std::vector<double>{2, 2, 2}).text;
  const auto p = parse_output(a + "\n" + b + "\n<forecast>\n(2024", inst.horizon_timestamps);
  EXPECT_EQ(p.values(), (std::vector<double>{2, 2, 2}));
  EXPECT_EQ(*p.analysis, "y");
}

TEST(Parse, StatusNamesRoundTrip) {
  for (auto s : {ParseStatus::ok, ParseStatus::missing_forecast, ParseStatus::malformed_line, ParseStatus::count_short,
                 ParseStatus::timestamp_mismatch}) {
    EXPECT_EQ(parse_status_from_string(to_string(s)), s);
  }
}

TEST(Parse, FuzzNeverThrowsAndKeepsInvariants) {
  const auto inst = sample_instance();
  const auto good = serialize_response("ok", inst.horizon_timestamps, std::vector<double>{1.5, 2.5, 3.5}).text;
  const std::string alphabet = "<>/()\n ,.-0123456789eE:forecastanlysi";
  Rng rng(99);
  for (int i = 0; i < 10000; ++i) {
    std::string s = good;
    const auto edits = rng.below(12);
    for (std::uint64_t e = 0; e < edits; ++e) {
      const auto pos = rng.below(s.size() + 1);
      switch (rng.below(3)) {
        case 0:
          s.insert(s.begin() + static_cast<std::ptrdiff_t>(pos), alphabet[rng.below(alphabet.size())]);
          break;
        case 1:
          if (pos < s.size()) s.erase(pos, 1 + rng.below(8));
          break;
        default:
          if (pos < s.size()) s[pos] = static_cast<char>(rng.below(256));
      }
    }
    ParsedOutput p;
    ASSERT_NO_THROW(p = parse_output(s, inst.horizon_timestamps));
    if (p.valid_window) {
      ASSERT_EQ(p.forecast->size(), inst.horizon());
      for (std::size_t t = 0; t < inst.horizon(); ++t) ASSERT_EQ((*p.forecast)[t].timestamp, inst.horizon_timestamps[t]);
    } else {
      ASSERT_NE(p.parse_status, ParseStatus::ok);
    }
  }
}

TEST(Parse, RenderParseRoundTripIsExact) {
  Rng rng(4);
  for (int i = 0; i < 2000; ++i) {
    const auto H = 1 + rng.below(24);
    std::vector<double> hist(10), prior(H);
    for (auto& x : hist) x = rng.uniform(-1e6, 1e6);
    for (auto& x : prior) x = rng.uniform(-1e6, 1e6) * std::pow(10.0, static_cast<double>(rng.below(10)) - 5.0);
    const auto inst = make_instance(hist, std::nullopt, prior);
    const auto resp = serialize_response("a", inst.horizon_timestamps, prior);
    const auto p = parse_output(resp.text, inst.horizon_timestamps);
    ASSERT_TRUE(p.valid_window);
    const auto v = p.values();
    for (std::size_t t = 0; t < H; ++t) ASSERT_LE(std::fabs(v[t] - prior[t]), 1e-12 * std::max(1.0, std::fabs(prior[t])));
    ASSERT_TRUE(detect_fallback(p, prior));
    // the rendered initial forecast block parses back to the prior as well
    const auto prompt = render_prompt(inst, PromptMode::revise);
    const auto block = detail::last_block(prompt.text, "initial_forecast");
    const auto again = parse_output("<forecast>" + std::string(*block) + "</forecast>", inst.horizon_timestamps);
    ASSERT_EQ(again.values(), prior);
  }
}

TEST(Response, SpansCoverWholeText) {
  const auto inst = sample_instance();
  const auto r = serialize_response("why", inst.horizon_timestamps, std::vector<double>{1, 2, 3});
  EXPECT_EQ(r.analysis_span.first, 0u);
  EXPECT_EQ(r.analysis_span.second, r.forecast_span.first);
  EXPECT_EQ(r.forecast_span.second, r.text.size());
  EXPECT_EQ(r.text.substr(r.forecast_span.first, 10), "<forecast>");
}

TEST(Fallback, Detection) {
  const auto inst = sample_instance();
  const auto& prior = *inst.prior;
  auto parse = [&](std::vector<double> v) {
    return parse_output(serialize_response("a", inst.horizon_timestamps, v).text, inst.horizon_timestamps);
  };
  EXPECT_TRUE(detect_fallback(parse(prior), prior));
  auto moved = prior;
  moved[1] *= 1.01;
  EXPECT_FALSE(detect_fallback(parse(moved), prior));
  EXPECT_THROW(detect_fallback(parse_output("nothing", inst.horizon_timestamps), prior), ValidationError);
}

TEST(ContextStats, WordsAndGaps) {
  EXPECT_EQ(word_count("OPEC extends cuts"), 3u);
  const auto c = make_context("m", "c", "v", {{"2024-06-02", "a"}, {"2024-08-15", "b"}});
  const auto s = context_stats(c, Date::from_ymd(2024, 9, 1));
  EXPECT_EQ(*s.closest_event_gap_days, 17);
  EXPECT_FALSE(context_stats(make_context("m", "c", "v", {}), Date::from_ymd(2024, 9, 1)).closest_event_gap_days);
  const auto undated = make_context("m", "c", "v", {{"", "no date here"}});
  EXPECT_EQ(context_stats(undated, Date::from_ymd(2024, 9, 1)).skipped_events, 1u);
}

TEST(Rmafd, ReferenceValues) {
  EXPECT_EQ(*rmafd(std::vector<double>{4, 4, 4}), 0.0);
  EXPECT_DOUBLE_EQ(*rmafd(std::vector<double>{1, 2, 3}), 0.5);
  EXPECT_EQ(*rmafd(std::vector<double>{0, 0, 0}), 0.0);
  EXPECT_DOUBLE_EQ(*rmafd(std::vector<double>{1, -1}), 2.0);
  EXPECT_THROW(rmafd(std::vector<double>{1}), ValidationError);
}
