#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace crops {

// Bad input data or configuration. Maps to exit code 1 in the CLI.
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A record in a line-delimited file could not be parsed.
class ParseError : public ValidationError {
 public:
  ParseError(std::size_t line, const std::string& what)
      : ValidationError("line " + std::to_string(line) + ": " + what), line_(line) {}

  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

// Filesystem failures. Maps to exit code 2 in the CLI.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace crops
