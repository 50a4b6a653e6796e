#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "revisebench/dates.hpp"
#include "revisebench/error.hpp"
#include "revisebench/numeric.hpp"

using namespace revisebench;

TEST(Date, IsoRoundTrip) {
  const auto d = Date::from_ymd(2024, 2, 29);
  EXPECT_EQ(d.iso(), "2024-02-29");
  EXPECT_EQ(d.timestamp(), "2024-02-29 00:00:00");
  EXPECT_EQ(parse_date(d.iso()), d);
  EXPECT_EQ((d + 1).iso(), "2024-03-01");
  EXPECT_EQ(Date::from_ymd(2025, 1, 30) - Date::from_ymd(2024, 12, 31), 30);
}

TEST(Date, AcceptsTimestampForms) {
  const auto d = Date::from_ymd(2024, 9, 1);
  EXPECT_EQ(parse_date("2024-09-01 00:00:00"), d);
  EXPECT_EQ(parse_date("2024-09-01T00:00:00"), d);
  EXPECT_EQ(parse_date("2024-09-01T00:00:00Z"), d);
  EXPECT_EQ(parse_date("  2024-09-01  "), d);
}

TEST(Date, RejectsInvalid) {
  for (const char* bad : {"2023-02-29", "2024-13-01", "2024-1-01", "yesterday", "", "2024-09-01 25:00:00"}) {
    EXPECT_FALSE(try_parse_date(bad).has_value()) << bad;
    EXPECT_THROW(parse_date(bad), ParseError) << bad;
  }
}

TEST(Date, EpochDaysConsistentOverManyYears) {
  Date d = Date::from_ymd(1999, 12, 25);
  for (int i = 0; i < 20000; ++i, d = d + 1) {
    ASSERT_EQ(parse_date(d.iso()), d);
  }
}

TEST(Numeric, FormatParseRoundTripIsExact) {
  Rng rng(3);
  for (int i = 0; i < 20000; ++i) {
    const double x = (rng.uniform() - 0.5) * std::pow(10.0, static_cast<double>(rng.below(30)) - 15.0);
    const auto back = parse_number(format_number(x));
    ASSERT_TRUE(back.has_value());
    ASSERT_EQ(*back, x);
  }
  EXPECT_EQ(format_number(123.45), "123.45");
  EXPECT_EQ(format_number(2.0), "2");
}

TEST(Numeric, ParseRejectsNonNumbers) {
  for (const char* bad : {"", "1.0x", "nan", "inf", "-inf", "1e999", "abc", " 1"}) {
    EXPECT_FALSE(parse_number(bad).has_value()) << bad;
  }
  EXPECT_EQ(*parse_number("-0.5"), -0.5);
  EXPECT_EQ(*parse_number("1e3"), 1000.0);
}

TEST(Numeric, Fnv1aReferenceVectors) {
  EXPECT_EQ(fnv1a(""), 0xcbf29ce484222325ULL);
  EXPECT_EQ(fnv1a("a"), 0xaf63dc4c8601ec8cULL);
  EXPECT_EQ(fnv1a("foobar"), 0x85944171f73967e8ULL);
  EXPECT_EQ(hex64(0xabcULL), "0000000000000abc");
}

TEST(Numeric, RngIsDeterministicAndInRange) {
  Rng a(42), b(42), c(43);
  bool differs = false;
  for (int i = 0; i < 1000; ++i) {
    const double x = a.uniform();
    ASSERT_EQ(x, b.uniform());
    differs |= x != c.uniform();
    ASSERT_GE(x, 0.0);
    ASSERT_LT(x, 1.0);
    ASSERT_LT(a.below(7), 7u);
    b.below(7);
  }
  EXPECT_TRUE(differs);
}

TEST(Numeric, NormalMomentsAreClose) {
  Rng rng(9);
  const int n = 200000;
  double s = 0.0, ss = 0.0;
  for (int i = 0; i < n; ++i) {
    const double z = rng.normal();
    s += z;
    ss += z * z;
  }
  EXPECT_NEAR(s / n, 0.0, 0.01);
  EXPECT_NEAR(ss / n, 1.0, 0.02);
}
