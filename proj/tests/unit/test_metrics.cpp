#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "builders.hpp"
#include "revisebench/metrics.hpp"

using namespace revisebench;
using revisebench::test_support::make_instance;

namespace {

// Independent oracle: straight from the definitions, no shared helpers.
struct Oracle {
  double mae, mse;
  std::optional<double> nmae, nmse;
};

Oracle oracle_score(const std::vector<double>& f, const std::vector<double>& y, const std::vector<double>& hist,
                    int period) {
  const int T = static_cast<int>(hist.size());
  const int p = std::min(period, T);
  double ae = 0, se = 0, nae = 0, nse = 0;
  for (std::size_t t = 0; t < y.size(); ++t) {
    const double naive = hist[static_cast<std::size_t>(T - p + static_cast<int>(t) % p)];
    ae += std::fabs(f[t] - y[t]);
    se += (f[t] - y[t]) * (f[t] - y[t]);
    nae += std::fabs(naive - y[t]);
    nse += (naive - y[t]) * (naive - y[t]);
  }
  Oracle o{ae / y.size(), se / y.size(), std::nullopt, std::nullopt};
  if (nae > 0 && nse > 0) {
    o.nmae = ae / nae;
    o.nmse = se / nse;
  }
  return o;
}

void expect_rel(double got, double want, double tol) {
  EXPECT_LE(std::fabs(got - want), tol * std::max(1.0, std::fabs(want))) << got << " vs " << want;
}

}  // namespace

TEST(SeasonalNaive, ReferenceExamples) {
  std::vector<double> h(96);
  for (int i = 0; i < 96; ++i) h[i] = i + 1;
  EXPECT_EQ(seasonal_naive(h, Frequency::daily, 12),
            (std::vector<double>{90, 91, 92, 93, 94, 95, 96, 90, 91, 92, 93, 94}));
  EXPECT_EQ(seasonal_naive(std::vector<double>(10, 5.0), Frequency::daily, 4), std::vector<double>(4, 5.0));
  EXPECT_EQ(seasonal_naive(std::vector<double>{1.5, 2.5, 3.5}, Frequency::daily, 4),
            (std::vector<double>{1.5, 2.5, 3.5, 1.5}));
  std::vector<double> w(60);
  for (int i = 0; i < 60; ++i) w[i] = i;
  EXPECT_EQ(seasonal_naive(w, Frequency::weekly, 3), (std::vector<double>{8, 9, 10}));
  EXPECT_THROW(seasonal_naive(std::vector<double>{}, Frequency::daily, 3), ValidationError);
}

TEST(Score, HandArithmetic) {
  // history chosen so that seasonal naive with p = 2 gives [9, 13]
  auto inst = make_instance({9, 13}, std::vector<double>{10, 12});
  SeasonalPeriodMap periods{2, 52};
  const auto r = score(std::vector<double>{11, 11}, inst, periods);
  EXPECT_DOUBLE_EQ(r.mae, 1.0);
  EXPECT_DOUBLE_EQ(r.mse, 1.0);
  EXPECT_EQ(*r.nmae, 1.0);
  EXPECT_EQ(*r.nmse, 1.0);
  const auto perfect = score(std::vector<double>{10, 12}, inst, periods);
  EXPECT_EQ(perfect.mae, 0.0);
  EXPECT_EQ(*perfect.nmae, 0.0);
}

TEST(Score, UndefinedWhenNaiveIsExact) {
  auto inst = make_instance({3, 3, 3}, std::vector<double>{3, 3});
  const auto r = score(std::vector<double>{4, 4}, inst);
  EXPECT_EQ(r.mae, 1.0);
  EXPECT_FALSE(r.normalized_defined());
}

TEST(Score, ContractViolations) {
  auto inst = make_instance({1, 2, 3}, std::vector<double>{1, 2});
  EXPECT_THROW(score(std::vector<double>{1}, inst), ValidationError);
  EXPECT_THROW(score(std::vector<double>{1, std::nan("")}, inst), ValidationError);
  inst.ground_truth.reset();
  EXPECT_THROW(score(std::vector<double>{1, 2}, inst), ValidationError);
}

TEST(Score, AgreesWithBruteForceOracle) {
  Rng rng(11);
  for (int trial = 0; trial < 1000; ++trial) {
    const auto T = 1 + rng.below(120);
    const auto H = 1 + rng.below(30);
    const auto f = rng.below(2) ? Frequency::daily : Frequency::weekly;
    std::vector<double> hist(T), y(H), fc(H);
    for (auto& x : hist) x = rng.uniform(-50, 150);
    for (auto& x : y) x = rng.uniform(-50, 150);
    for (auto& x : fc) x = rng.uniform(-50, 150);
    auto inst = make_instance(hist, y, std::nullopt, f);
    const auto r = score(fc, inst);
    const auto o = oracle_score(fc, y, hist, f == Frequency::daily ? 7 : 52);
    expect_rel(r.mae, o.mae, 1e-12);
    expect_rel(r.mse, o.mse, 1e-12);
    ASSERT_EQ(r.nmae.has_value(), o.nmae.has_value());
    if (o.nmae) {
      expect_rel(*r.nmae, *o.nmae, 1e-12);
      expect_rel(*r.nmse, *o.nmse, 1e-12);
    }
    // the seasonal naive forecast scores exactly one
    const auto naive = score(seasonal_naive(hist, f, H), inst);
    if (naive.normalized_defined()) {
      ASSERT_NEAR(*naive.nmae, 1.0, 1e-12);
      ASSERT_NEAR(*naive.nmse, 1.0, 1e-12);
    }
  }
}

TEST(Score, NormalizedMetricsAreScaleFree) {
  Rng rng(12);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> hist(40), y(8), fc(8);
    for (auto& x : hist) x = rng.uniform(0, 10);
    for (auto& x : y) x = rng.uniform(0, 10);
    for (auto& x : fc) x = rng.uniform(0, 10);
    const double lambda = rng.uniform(0.01, 1000);
    const auto base = score(fc, make_instance(hist, y));
    for (auto* v : {&hist, &y, &fc}) {
      for (auto& x : *v) x *= lambda;
    }
    const auto scaled = score(fc, make_instance(hist, y));
    expect_rel(*scaled.nmae, *base.nmae, 1e-10);
    expect_rel(*scaled.nmse, *base.nmse, 1e-10);
    expect_rel(scaled.mae, base.mae * lambda, 1e-10);
  }
}

TEST(NaivePrior, Kinds) {
  auto inst = make_instance({1, 2, 7.5}, std::nullopt, std::nullopt, Frequency::daily, Date::from_ymd(2024, 1, 1),
                            "v", 2);
  EXPECT_EQ(naive_prior(inst, PriorKind::last_value), (std::vector<double>{7.5, 7.5}));
  auto m = make_instance({1, 2, 3}, std::nullopt, std::nullopt, Frequency::daily, Date::from_ymd(2024, 1, 1), "v", 2);
  EXPECT_EQ(naive_prior(m, PriorKind::mean), (std::vector<double>{2, 2}));
  EXPECT_EQ(naive_prior(m, PriorKind::seasonal_naive), seasonal_naive(m.history_values(), m.frequency, 2));
  apply_naive_prior(m, PriorKind::mean);
  EXPECT_EQ(m.prior_source, "builtin:mean");
  EXPECT_THROW(parse_prior_kind("timesfm"), ConfigError);
}

TEST(Priors, AttachJoinsAndReportsUnmatched) {
  std::vector<ForecastInstance> insts;
  for (int d = 0; d < 3; ++d) {
    insts.push_back(make_instance({1, 2, 3}, std::vector<double>{4, 5}, std::nullopt, Frequency::daily,
                                  Date::from_ymd(2024, 1, 1) + d, "v"));
  }
  std::ostringstream out;
  auto with = insts;
  for (auto& i : with) i.prior = std::vector<double>{9, 9};
  with.pop_back();
  write_prior_file(out, with);
  std::istringstream in(out.str());
  const auto priors = read_prior_file(in);
  auto res = attach_priors(insts, priors);
  EXPECT_EQ(res.joined, 2u);
  ASSERT_EQ(res.unmatched.size(), 1u);
  EXPECT_EQ(res.unmatched[0], insts[2].instance_id);
  EXPECT_EQ(*insts[0].prior, (std::vector<double>{9, 9}));
}

TEST(Priors, WrongLengthNamesInstanceAndLeavesInputsUntouched) {
  std::vector<ForecastInstance> insts{
      make_instance({1, 2, 3}, std::vector<double>{4, 5}, std::nullopt, Frequency::daily, Date::from_ymd(2024, 1, 1)),
      make_instance({1, 2, 3}, std::vector<double>{4, 5}, std::nullopt, Frequency::daily, Date::from_ymd(2024, 2, 1))};
  std::map<std::string, PriorEntry> priors;
  priors[insts[0].instance_id] = {std::vector<double>{1, 1}, "f"};
  priors[insts[1].instance_id] = {std::vector<double>{1}, "f"};
  try {
    attach_priors(insts, priors);
    FAIL() << "expected ValidationError";
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find(insts[1].instance_id), std::string::npos);
  }
  EXPECT_FALSE(insts[0].prior.has_value());
}

TEST(Priors, DuplicateIdsRejected) {
  std::istringstream in(R"({"instance_id":"a","forecast":[1]}
{"instance_id":"a","forecast":[2]})");
  EXPECT_THROW(read_prior_file(in), ValidationError);
}
