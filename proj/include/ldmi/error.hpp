#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace ldmi {

enum class ErrorCode {
  kBadMagic,
  kTruncated,
  kUnknownDtype,
  kUnsupportedFormat,
  kUnsupportedMaxval,
  kMalformedHeader,
  kUnknownKind,
  kShapeMismatch,
  kInvalidArgument,
  kDegenerateNorm,
  kResolutionMismatch,
  kStageMismatch,
  kIncompleteCheckpoint,
  kEmptyContext,
  kDivergence,
  kInvalidConfig,
  kIo,
};

/// Stable kebab-case identifier used in CLI error lines.
std::string_view error_code_name(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace ldmi
