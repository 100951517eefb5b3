#include "gridstab/error.hpp"

namespace gridstab {

std::string_view to_string(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::MissingFile: return "MissingFile";
    case ErrorCode::SchemaMismatch: return "SchemaMismatch";
    case ErrorCode::RangeViolation: return "RangeViolation";
    case ErrorCode::BalanceViolation: return "BalanceViolation";
    case ErrorCode::ZeroVariance: return "ZeroVariance";
    case ErrorCode::EmptySplit: return "EmptySplit";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::EmptyInput: return "EmptyInput";
    case ErrorCode::NotNormalized: return "NotNormalized";
    case ErrorCode::UntrainedModel: return "UntrainedModel";
    case ErrorCode::InvalidConfig: return "InvalidConfig";
    case ErrorCode::InvalidArchitecture: return "InvalidArchitecture";
    case ErrorCode::StaleCache: return "StaleCache";
    case ErrorCode::TooFewRows: return "TooFewRows";
    case ErrorCode::FoldDegenerate: return "FoldDegenerate";
    case ErrorCode::LengthMismatch: return "LengthMismatch";
    case ErrorCode::UnknownFeature: return "UnknownFeature";
    case ErrorCode::NotUnstable: return "NotUnstable";
    case ErrorCode::EpisodeFinished: return "EpisodeFinished";
    case ErrorCode::CurveTooShort: return "CurveTooShort";
    case ErrorCode::UntrainedComponent: return "UntrainedComponent";
    case ErrorCode::IoFailure: return "IoFailure";
    case ErrorCode::ParseError: return "ParseError";
  }
  return "Unknown";
}

}  // namespace gridstab
