#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace scaffold {

// Base for every error raised by the library. The CLI maps the concrete
// type onto its exit code (data errors = 2, numerical failures = 3).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed binary/text input. `offset` is a byte offset for binary formats
// and a 1-based row/line number for text formats.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t offset)
      : Error(what + " (at offset " + std::to_string(offset) + ")"), offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

// A well-formed document that violates a field invariant.
class ValidationError : public Error {
 public:
  ValidationError(std::string field, const std::string& what)
      : Error(field + ": " + what), field_(std::move(field)) {}
  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

class EmptyPerformanceError : public Error {
 public:
  EmptyPerformanceError() : Error("performance contains no note-on events") {}
};

class NumericalError : public Error {
 public:
  using Error::Error;
};

// Precondition on the data set (too small, single class, rank deficient ...).
class DataError : public Error {
 public:
  using Error::Error;
};

}  // namespace scaffold
