#pragma once

#include <stdexcept>
#include <string>

namespace ccmpc {

/// Malformed network description (syntax level). Carries the 1-based line number.
class ParseError : public std::runtime_error {
 public:
  ParseError(int line, const std::string& message)
      : std::runtime_error("line " + std::to_string(line) + ": " + message), line_(line) {}

  int line() const noexcept { return line_; }

 private:
  int line_;
};

/// Semantically invalid network (bad parameter, broken routing). Names the offending element.
class ValidationError : public std::runtime_error {
 public:
  ValidationError(const std::string& element, const std::string& message)
      : std::runtime_error(element.empty() ? message : element + ": " + message), element_(element) {}

  const std::string& element() const noexcept { return element_; }

 private:
  std::string element_;
};

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

}  // namespace ccmpc
