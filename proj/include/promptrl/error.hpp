// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace promptrl {

enum class ErrorCode {
  MissingSlot,
  DuplicateSlot,
  UnknownToken,
  DimensionMismatch,
  StaleCache,
  EmptySequence,
  IdOutOfRange,
  LengthMismatch,
  NonFiniteLoss,
  TSingular,
  NonFiniteState,
  ScheduleMismatch,
  NonConvergence,
  GroupAborted,
  NonFiniteGrad,
  TooFewPoints,
  MalformedLog,
  ConfigInvalid,
  InvalidArgument,
  Io,
};

constexpr std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::MissingSlot: return "MissingSlot";
    case ErrorCode::DuplicateSlot: return "DuplicateSlot";
    case ErrorCode::UnknownToken: return "UnknownToken";
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
    case ErrorCode::StaleCache: return "StaleCache";
    case ErrorCode::EmptySequence: return "EmptySequence";
    case ErrorCode::IdOutOfRange: return "IdOutOfRange";
    case ErrorCode::LengthMismatch: return "LengthMismatch";
    case ErrorCode::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorCode::TSingular: return "TSingular";
    case ErrorCode::NonFiniteState: return "NonFiniteState";
    case ErrorCode::ScheduleMismatch: return "ScheduleMismatch";
    case ErrorCode::NonConvergence: return "NonConvergence";
    case ErrorCode::GroupAborted: return "GroupAborted";
    case ErrorCode::NonFiniteGrad: return "NonFiniteGrad";
    case ErrorCode::TooFewPoints: return "TooFewPoints";
    case ErrorCode::MalformedLog: return "MalformedLog";
    case ErrorCode::ConfigInvalid: return "ConfigInvalid";
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::Io: return "Io";
  }
  return "Unknown";
}

/// Single exception type for the library; `code()` distinguishes the failure.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

/// Raised by sde_rollout when a state leaves the finite range.
class NonFiniteStateError : public Error {
 public:
  NonFiniteStateError(int step, const std::string& message)
      : Error(ErrorCode::NonFiniteState, message), step_(step) {}

  int step() const noexcept { return step_; }

 private:
  int step_;
};

/// Raised by config loading; `path()` is the dotted field path.
class ConfigError : public Error {
 public:
  ConfigError(std::string path, const std::string& reason)
      : Error(ErrorCode::ConfigInvalid, path + ": " + reason), path_(std::move(path)), reason_(reason) {}

  const std::string& path() const noexcept { return path_; }
  const std::string& reason() const noexcept { return reason_; }

 private:
  std::string path_;
  std::string reason_;
};

inline void require(bool cond, ErrorCode code, const std::string& message) {
  if (!cond) {
    throw Error(code, message);
  }
}

}  // namespace promptrl
