#include "moerl/error.hpp"

namespace moerl {

namespace {
std::string prefixed(ErrorKind kind, const std::string& message) {
  return std::string(to_string(kind)) + " error: " + message;
}
}  // namespace

Error::Error(ErrorKind kind, const std::string& message)
    : std::runtime_error(prefixed(kind, message)), kind_(kind) {}

int Error::exit_code() const noexcept {
  switch (kind_) {
    case ErrorKind::config:
      return 2;
    case ErrorKind::data:
      return 3;
    case ErrorKind::numerical:
      return 4;
    default:
      return 1;
  }
}

const char* to_string(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::config:
      return "configuration";
    case ErrorKind::data:
      return "data";
    case ErrorKind::numerical:
      return "numerical";
    case ErrorKind::usage:
      return "usage";
    case ErrorKind::shape:
      return "shape";
    case ErrorKind::dependency:
      return "dependency";
    case ErrorKind::io:
      return "io";
  }
  return "unknown";
}

}  // namespace moerl
