#pragma once

#include <chrono>
#include <cstdint>
#include <cstdio>
#include <optional>
#include <string>
#include <string_view>

#include "revisebench/error.hpp"

namespace revisebench {

/// Calendar date at day resolution, stored as days since 1970-01-01.
class Date {
 public:
  constexpr Date() = default;
  constexpr explicit Date(std::int64_t epoch_days) : days_(epoch_days) {}

  static Date from_ymd(int year, unsigned month, unsigned day) {
    const std::chrono::year_month_day ymd{std::chrono::year{year}, std::chrono::month{month},
                                          std::chrono::day{day}};
    if (!ymd.ok()) {
      throw ValidationError("invalid calendar date " + std::to_string(year) + "-" +
                            std::to_string(month) + "-" + std::to_string(day));
    }
    return Date(std::chrono::sys_days{ymd}.time_since_epoch().count());
  }

  constexpr std::int64_t epoch_days() const noexcept { return days_; }

  std::chrono::year_month_day ymd() const {
    return std::chrono::year_month_day{std::chrono::sys_days{std::chrono::days{days_}}};
  }

  /// "YYYY-MM-DD"
  std::string iso() const {
    const auto d = ymd();
    char buf[16];
    std::snprintf(buf, sizeof buf, "%04d-%02u-%02u", static_cast<int>(d.year()),
                  static_cast<unsigned>(d.month()), static_cast<unsigned>(d.day()));
    return buf;
  }

  /// "YYYY-MM-DD 00:00:00", the timestamp form used inside prompts.
  std::string timestamp() const { return iso() + " 00:00:00"; }

  constexpr Date operator+(std::int64_t n) const noexcept { return Date(days_ + n); }
  constexpr Date operator-(std::int64_t n) const noexcept { return Date(days_ - n); }
  constexpr std::int64_t operator-(Date other) const noexcept { return days_ - other.days_; }
  constexpr auto operator<=>(const Date&) const = default;

 private:
  std::int64_t days_ = 0;
};

namespace detail {

inline bool parse_uint(std::string_view s, unsigned& out) {
  if (s.empty()) return false;
  unsigned v = 0;
  for (char c : s) {
    if (c < '0' || c > '9') return false;
    v = v * 10 + static_cast<unsigned>(c - '0');
  }
  out = v;
  return true;
}

inline std::string_view trim(std::string_view s) {
  const auto* ws = " \t\r\n\f\v";
  const auto b = s.find_first_not_of(ws);
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(ws);
  return s.substr(b, e - b + 1);
}

}  // namespace detail

/// Parses "YYYY-MM-DD", "YYYY-MM-DD HH:MM:SS" or "YYYY-MM-DDTHH:MM:SS[Z]".
/// The time-of-day part is accepted and discarded (day resolution).
inline std::optional<Date> try_parse_date(std::string_view text) {
  text = detail::trim(text);
  if (text.size() < 10 || text[4] != '-' || text[7] != '-') return std::nullopt;
  unsigned y = 0, m = 0, d = 0;
  if (!detail::parse_uint(text.substr(0, 4), y) || !detail::parse_uint(text.substr(5, 2), m) ||
      !detail::parse_uint(text.substr(8, 2), d)) {
    return std::nullopt;
  }
  if (text.size() > 10) {
    auto rest = text.substr(10);
    if (rest[0] != ' ' && rest[0] != 'T') return std::nullopt;
    rest = rest.substr(1);
    if (!rest.empty() && rest.back() == 'Z') rest.remove_suffix(1);
    if (rest.size() != 8 || rest[2] != ':' || rest[5] != ':') return std::nullopt;
    unsigned hh = 0, mm = 0, ss = 0;
    if (!detail::parse_uint(rest.substr(0, 2), hh) || !detail::parse_uint(rest.substr(3, 2), mm) ||
        !detail::parse_uint(rest.substr(6, 2), ss) || hh > 23 || mm > 59 || ss > 60) {
      return std::nullopt;
    }
  }
  const std::chrono::year_month_day ymd{std::chrono::year{static_cast<int>(y)},
                                        std::chrono::month{m}, std::chrono::day{d}};
  if (!ymd.ok()) return std::nullopt;
  return Date(std::chrono::sys_days{ymd}.time_since_epoch().count());
}

inline Date parse_date(std::string_view text) {
  if (auto d = try_parse_date(text)) return *d;
  throw ParseError("unparseable date '" + std::string(text) + "'");
}

}  // namespace revisebench
