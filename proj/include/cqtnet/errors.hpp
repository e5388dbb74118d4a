#pragma once

#include <stdexcept>
#include <string>

namespace cqtnet {

enum class ErrorKind {
  kInvalidInput,
  kFormat,
  kUnsupported,
  kIo,
  kShape,
  kIndex,
  kRange,
  kTooShort,
  kConfig,
  kLookup,
  kNumeric,
  kUninitializedStats,
  kInvariantViolation,
  kUndefinedMetric,
};

const char* error_kind_name(ErrorKind kind);

// Single exception type for the library; callers dispatch on kind().
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message);

  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] void fail(ErrorKind kind, const std::string& message);

// Process exit code used by the CLI: 2 for data/format problems, 3 for
// numeric failures.
int exit_code_for(ErrorKind kind);

}  // namespace cqtnet
