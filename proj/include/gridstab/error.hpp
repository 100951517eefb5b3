#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace gridstab {

enum class ErrorCode {
  MissingFile,
  SchemaMismatch,
  RangeViolation,
  BalanceViolation,
  ZeroVariance,
  EmptySplit,
  ShapeMismatch,
  EmptyInput,
  NotNormalized,
  UntrainedModel,
  InvalidConfig,
  InvalidArchitecture,
  StaleCache,
  TooFewRows,
  FoldDegenerate,
  LengthMismatch,
  UnknownFeature,
  NotUnstable,
  EpisodeFinished,
  CurveTooShort,
  UntrainedComponent,
  IoFailure,
  ParseError,
};

std::string_view to_string(ErrorCode code) noexcept;

// Every failure raised by the library carries a machine-checkable code.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 protected:
  struct Verbatim {};
  Error(Verbatim, ErrorCode code, const std::string& message) : std::runtime_error(message), code_(code) {}

 private:
  ErrorCode code_;
};

}  // namespace gridstab
