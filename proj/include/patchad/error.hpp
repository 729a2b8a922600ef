#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace patchad {

enum class ErrorCode {
  MalformedFile,
  EmptyCloud,
  DegenerateCloud,
  BadK,
  TooFewPoints,
  Unsupported,
  BadCount,
  MissingNormals,
  BadWavelength,
  EmptyIntersection,
  RatioOutOfRange,
  ShapeMismatch,
  NonScalarOutput,
  NonFinite,
  EmptyPatch,
  EmptyLevel,
  EmptyInput,
  VersionMismatch,
  CorruptFile,
  EmptyTemplates,
  NaNLoss,
  SingleClass,
  CountMismatch,
  MissingLabels,
  BadConfig,
  IoError,
  UsageError,
};

constexpr std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::MalformedFile: return "MalformedFile";
    case ErrorCode::EmptyCloud: return "EmptyCloud";
    case ErrorCode::DegenerateCloud: return "DegenerateCloud";
    case ErrorCode::BadK: return "BadK";
    case ErrorCode::TooFewPoints: return "TooFewPoints";
    case ErrorCode::Unsupported: return "Unsupported";
    case ErrorCode::BadCount: return "BadCount";
    case ErrorCode::MissingNormals: return "MissingNormals";
    case ErrorCode::BadWavelength: return "BadWavelength";
    case ErrorCode::EmptyIntersection: return "EmptyIntersection";
    case ErrorCode::RatioOutOfRange: return "RatioOutOfRange";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::NonScalarOutput: return "NonScalarOutput";
    case ErrorCode::NonFinite: return "NonFinite";
    case ErrorCode::EmptyPatch: return "EmptyPatch";
    case ErrorCode::EmptyLevel: return "EmptyLevel";
    case ErrorCode::EmptyInput: return "EmptyInput";
    case ErrorCode::VersionMismatch: return "VersionMismatch";
    case ErrorCode::CorruptFile: return "CorruptFile";
    case ErrorCode::EmptyTemplates: return "EmptyTemplates";
    case ErrorCode::NaNLoss: return "NaNLoss";
    case ErrorCode::SingleClass: return "SingleClass";
    case ErrorCode::CountMismatch: return "CountMismatch";
    case ErrorCode::MissingLabels: return "MissingLabels";
    case ErrorCode::BadConfig: return "BadConfig";
    case ErrorCode::IoError: return "IoError";
    case ErrorCode::UsageError: return "UsageError";
  }
  return "Unknown";
}

/// Every failure in the library is reported as an Error carrying a stable code.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) { throw Error(code, what); }

}  // namespace patchad
