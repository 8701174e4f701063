#include "discap/error.hpp"

namespace discap {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::invalid_argument: return "invalid_argument";
    case ErrorCode::missing_artifact: return "missing_artifact";
    case ErrorCode::config_invalid: return "config_invalid";
    case ErrorCode::numerical_abort: return "numerical_abort";
    case ErrorCode::malformed_file: return "malformed_file";
  }
  return "unknown";
}

}  // namespace discap
