#pragma once

#include <stdexcept>
#include <string>

namespace moerl {

enum class ErrorKind {
  config,      // invalid configuration or model definition
  data,        // malformed or out-of-domain input data
  numerical,   // NaN, divergence, non-convergence
  usage,       // API misuse (empty history, stale cache, k > size)
  shape,       // dimension mismatch
  dependency,  // missing upstream artifact
  io,
};

/// Base exception for every failure raised by the toolkit. The kind decides
/// the CLI exit status.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message);

  ErrorKind kind() const noexcept { return kind_; }

  /// 2 config, 3 data, 4 numerical, 1 anything else.
  int exit_code() const noexcept;

 private:
  ErrorKind kind_;
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& m) : Error(ErrorKind::config, m) {}
};
class DataError : public Error {
 public:
  explicit DataError(const std::string& m) : Error(ErrorKind::data, m) {}
};
class NumericalError : public Error {
 public:
  explicit NumericalError(const std::string& m) : Error(ErrorKind::numerical, m) {}
};
class UsageError : public Error {
 public:
  explicit UsageError(const std::string& m) : Error(ErrorKind::usage, m) {}
};
class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& m) : Error(ErrorKind::shape, m) {}
};
class DependencyError : public Error {
 public:
  explicit DependencyError(const std::string& m) : Error(ErrorKind::dependency, m) {}
};
class IoError : public Error {
 public:
  explicit IoError(const std::string& m) : Error(ErrorKind::io, m) {}
};

const char* to_string(ErrorKind kind) noexcept;

}  // namespace moerl
