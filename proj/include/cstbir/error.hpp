#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace cstbir {

enum class ErrorCode {
  invalid_argument,
  invalid_sketch,
  empty_intersection,
  shape_mismatch,
  out_of_range,
  uniqueness,
  not_found,
  io,
  corrupt,
  non_finite,
  unavailable,
};

constexpr std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::invalid_argument: return "invalid_argument";
    case ErrorCode::invalid_sketch: return "invalid_sketch";
    case ErrorCode::empty_intersection: return "empty_intersection";
    case ErrorCode::shape_mismatch: return "shape_mismatch";
    case ErrorCode::out_of_range: return "out_of_range";
    case ErrorCode::uniqueness: return "uniqueness";
    case ErrorCode::not_found: return "not_found";
    case ErrorCode::io: return "io";
    case ErrorCode::corrupt: return "corrupt";
    case ErrorCode::non_finite: return "non_finite";
    case ErrorCode::unavailable: return "unavailable";
  }
  return "unknown";
}

// All library failures surface as this exception; `code()` is stable and
// machine-readable, `what()` is for humans.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
  throw Error(code, message);
}

inline void require(bool condition, ErrorCode code, const std::string& message) {
  if (!condition) fail(code, message);
}

}  // namespace cstbir
