#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace discap {

// Failure classes surfaced by the command-line tool as distinct exit codes.
enum class ErrorCode {
  invalid_argument,
  missing_artifact,
  config_invalid,
  numerical_abort,
  malformed_file,
};

std::string_view to_string(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(const std::string& message) {
  throw Error(ErrorCode::invalid_argument, message);
}

inline void require(bool condition, const std::string& message) {
  if (!condition) fail(message);
}

}  // namespace discap
