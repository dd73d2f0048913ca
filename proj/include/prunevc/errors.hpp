#pragma once

#include <stdexcept>
#include <string>

namespace prunevc {

// Process exit codes used by the CLI. Library code throws; the CLI maps.
enum class ExitCode : int {
  ok = 0,
  failure = 1,
  config_error = 2,
  numeric_fault = 3,
  io_error = 4,
};

class Error : public std::runtime_error {
 public:
  Error(ExitCode code, const std::string& msg)
      : std::runtime_error(msg), code_(code) {}
  ExitCode code() const { return code_; }

 private:
  ExitCode code_;
};

// Incompatible tensor shapes, bad geometry, invalid plans.
class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& msg) : Error(ExitCode::failure, msg) {}
};

// NaN/Inf escaped a forward pass or a loss went non-finite.
class NumericFault : public Error {
 public:
  explicit NumericFault(const std::string& msg)
      : Error(ExitCode::numeric_fault, msg) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& msg)
      : Error(ExitCode::config_error, msg) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& msg) : Error(ExitCode::io_error, msg) {}
};

}  // namespace prunevc
