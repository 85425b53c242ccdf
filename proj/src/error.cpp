#include "ldmi/error.hpp"

namespace ldmi {

std::string_view error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::kBadMagic: return "bad-magic";
    case ErrorCode::kTruncated: return "truncated";
    case ErrorCode::kUnknownDtype: return "unknown-dtype";
    case ErrorCode::kUnsupportedFormat: return "unsupported-format";
    case ErrorCode::kUnsupportedMaxval: return "unsupported-maxval";
    case ErrorCode::kMalformedHeader: return "malformed-header";
    case ErrorCode::kUnknownKind: return "unknown-kind";
    case ErrorCode::kShapeMismatch: return "shape-mismatch";
    case ErrorCode::kInvalidArgument: return "invalid-argument";
    case ErrorCode::kDegenerateNorm: return "degenerate-norm";
    case ErrorCode::kResolutionMismatch: return "resolution-mismatch";
    case ErrorCode::kStageMismatch: return "stage-mismatch";
    case ErrorCode::kIncompleteCheckpoint: return "incomplete-checkpoint";
    case ErrorCode::kEmptyContext: return "empty-context";
    case ErrorCode::kDivergence: return "divergence";
    case ErrorCode::kInvalidConfig: return "invalid-config";
    case ErrorCode::kIo: return "io";
  }
  return "unknown";
}

}  // namespace ldmi
