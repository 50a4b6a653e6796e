#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace revisebench {

/// Base of every error thrown by the toolkit.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A file or line that could not be decoded. Carries the 1-based line number
/// when the failure is tied to a line of a JSON-Lines file (0 otherwise).
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t line = 0)
      : Error(line ? "line " + std::to_string(line) + ": " + what : what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

/// Input decoded fine but violates a domain invariant.
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// Bad or inconsistent configuration (unknown enum value, missing credential, ...).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Endpoint could not be reached after the retry budget was spent.
class TransportError : public Error {
 public:
  using Error::Error;
};

}  // namespace revisebench
