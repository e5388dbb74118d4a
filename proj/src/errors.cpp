#include "cqtnet/errors.hpp"

namespace cqtnet {

const char* error_kind_name(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kInvalidInput: return "invalid input";
    case ErrorKind::kFormat: return "format error";
    case ErrorKind::kUnsupported: return "unsupported";
    case ErrorKind::kIo: return "I/O error";
    case ErrorKind::kShape: return "shape error";
    case ErrorKind::kIndex: return "index error";
    case ErrorKind::kRange: return "range error";
    case ErrorKind::kTooShort: return "too short";
    case ErrorKind::kConfig: return "config error";
    case ErrorKind::kLookup: return "lookup error";
    case ErrorKind::kNumeric: return "numeric error";
    case ErrorKind::kUninitializedStats: return "uninitialized statistics";
    case ErrorKind::kInvariantViolation: return "invariant violation";
    case ErrorKind::kUndefinedMetric: return "undefined metric";
  }
  return "error";
}

Error::Error(ErrorKind kind, const std::string& message)
    : std::runtime_error(std::string(error_kind_name(kind)) + ": " + message),
      kind_(kind) {}

void fail(ErrorKind kind, const std::string& message) {
  throw Error(kind, message);
}

int exit_code_for(ErrorKind kind) {
  return kind == ErrorKind::kNumeric ? 3 : 2;
}

}  // namespace cqtnet
