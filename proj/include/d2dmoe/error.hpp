#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace d2dmoe {

// Base of every error the library throws. The CLI maps the subclass to an
// exit code (see exit_code()).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor shape rule violated by an op.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Caller broke an API precondition (wrong tape, unsplit site, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

// Invalid configuration or spec file.
class ValidationError : public Error {
 public:
  using Error::Error;
};

// Bad runtime input (token out of range, empty dataset, ...).
class InputError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf detected or training diverged.
class NumericError : public Error {
 public:
  explicit NumericError(const std::string& what, std::int64_t step = -1)
      : Error(what), step_(step) {}
  std::int64_t step() const { return step_; }

 private:
  std::int64_t step_;
};

// Malformed checkpoint or data file. offset is the byte position where the
// problem was detected.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::uint64_t offset)
      : Error(what + " (at byte offset " + std::to_string(offset) + ")"),
        offset_(offset) {}
  std::uint64_t offset() const { return offset_; }

 private:
  std::uint64_t offset_;
};

// CLI exit codes: 0 success, 2 validation error, 3 numeric failure,
// 4 format error. Remaining library errors are reported as validation errors.
int exit_code(const std::exception& e);

}  // namespace d2dmoe
