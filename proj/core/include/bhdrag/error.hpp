#pragma once

#include <stdexcept>
#include <string>

namespace bhdrag {

enum class ErrorCode {
  InvalidVolume,
  SplitInfeasible,
  GenerationFailed,
  EmptyDescription,
  UnknownSlice,
  ManifestParseError,
  InvalidWindow,
  InvalidTarget,
  DimMismatch,
  FeatureDimMismatch,
  DuplicateFeature,
  MissingFeature,
  DegenerateEmbedding,
  TripletInfeasible,
  EmptyBatch,
  TrainingDiverged,
  EmptyIndex,
  NoEvidence,
  BackendUnavailable,
  BackendRejected,
  MissingImage,
  EmptyEvaluation,
  LeakageError,
  IoError,
  FormatError,
  ConfigError,
};

const char* to_string(ErrorCode code);

/// Domain error carrying a machine-readable code. Pipeline stages annotate
/// errors with their stage name before re-throwing; `line` is set for parse
/// errors, `status` for HTTP rejections.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + ": " + message),
        code_(code),
        message_(message) {}

  ErrorCode code() const noexcept { return code_; }
  const std::string& message() const noexcept { return message_; }

  const std::string& stage() const noexcept { return stage_; }
  Error& set_stage(const std::string& stage) {
    stage_ = stage;
    return *this;
  }

  int line() const noexcept { return line_; }
  Error& set_line(int line) {
    line_ = line;
    return *this;
  }

  int status() const noexcept { return status_; }
  Error& set_status(int status) {
    status_ = status;
    return *this;
  }

 private:
  ErrorCode code_;
  std::string message_;
  std::string stage_;
  int line_ = -1;
  int status_ = 0;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
  throw Error(code, message);
}

inline const char* to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::InvalidVolume: return "InvalidVolume";
    case ErrorCode::SplitInfeasible: return "SplitInfeasible";
    case ErrorCode::GenerationFailed: return "GenerationFailed";
    case ErrorCode::EmptyDescription: return "EmptyDescription";
    case ErrorCode::UnknownSlice: return "UnknownSlice";
    case ErrorCode::ManifestParseError: return "ManifestParseError";
    case ErrorCode::InvalidWindow: return "InvalidWindow";
    case ErrorCode::InvalidTarget: return "InvalidTarget";
    case ErrorCode::DimMismatch: return "DimMismatch";
    case ErrorCode::FeatureDimMismatch: return "FeatureDimMismatch";
    case ErrorCode::DuplicateFeature: return "DuplicateFeature";
    case ErrorCode::MissingFeature: return "MissingFeature";
    case ErrorCode::DegenerateEmbedding: return "DegenerateEmbedding";
    case ErrorCode::TripletInfeasible: return "TripletInfeasible";
    case ErrorCode::EmptyBatch: return "EmptyBatch";
    case ErrorCode::TrainingDiverged: return "TrainingDiverged";
    case ErrorCode::EmptyIndex: return "EmptyIndex";
    case ErrorCode::NoEvidence: return "NoEvidence";
    case ErrorCode::BackendUnavailable: return "BackendUnavailable";
    case ErrorCode::BackendRejected: return "BackendRejected";
    case ErrorCode::MissingImage: return "MissingImage";
    case ErrorCode::EmptyEvaluation: return "EmptyEvaluation";
    case ErrorCode::LeakageError: return "LeakageError";
    case ErrorCode::IoError: return "IoError";
    case ErrorCode::FormatError: return "FormatError";
    case ErrorCode::ConfigError: return "ConfigError";
  }
  return "UnknownError";
}

}  // namespace bhdrag
