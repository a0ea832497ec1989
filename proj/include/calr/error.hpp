#pragma once

#include <stdexcept>
#include <string>

namespace calr {

// Every failure the library can raise carries one of these codes so callers
// can branch on the cause instead of parsing messages.
enum class ErrorCode {
  kShapeMismatch,
  kInvalidArgument,
  kRankOutOfRange,
  kZeroNormVector,
  kSvdNonConvergence,
  kTokenOutOfRange,
  kCorpusTooSmall,
  kBadMagic,
  kBadVersion,
  kTruncatedTensor,
  kIoFailure,
  kBadConfig,
  kMissingGradient,
  kTapeConsumed,
  kNanLoss,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace calr
