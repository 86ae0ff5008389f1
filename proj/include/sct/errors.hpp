#pragma once

#include <stdexcept>
#include <string>

namespace sct {

// Base for every error raised by the library. `kind()` is the stable tag the
// CLI reports in its structured error output.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& message)
      : std::runtime_error(message), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& message) : Error("shape_error", message) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& message) : Error("config_error", message) {}
};

class NumericError : public Error {
 public:
  explicit NumericError(const std::string& message) : Error("numeric_error", message) {}
};

class NonDeterminismError : public Error {
 public:
  explicit NonDeterminismError(const std::string& message)
      : Error("nondeterminism_error", message) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& message) : Error("io_error", message) {}
};

// Dataset / checkpoint loading failures, each reported distinctly.
class ChecksumError : public Error {
 public:
  explicit ChecksumError(const std::string& message) : Error("checksum_error", message) {}
};

class TruncationError : public Error {
 public:
  explicit TruncationError(const std::string& message) : Error("truncation_error", message) {}
};

class ConsistencyError : public Error {
 public:
  explicit ConsistencyError(const std::string& message) : Error("consistency_error", message) {}
};

}  // namespace sct
