// Copyright 2026 The lidarclip-cpp Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace lidarclip {

enum class ErrorCode {
  kInvalidArgument,
  kCalibration,
  kEmptyInput,
  kNumeric,
  kDimensionMismatch,
  kDegenerateEmbedding,
  kDegenerateEnsemble,
  kBadMagic,
  kUnsupportedVersion,
  kTruncated,
  kFormat,
  kIo,
  kNotFound,
  kQuery,
  kUnavailable,
};

inline std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kInvalidArgument: return "invalid_argument";
    case ErrorCode::kCalibration: return "calibration";
    case ErrorCode::kEmptyInput: return "empty_input";
    case ErrorCode::kNumeric: return "numeric";
    case ErrorCode::kDimensionMismatch: return "dimension_mismatch";
    case ErrorCode::kDegenerateEmbedding: return "degenerate_embedding";
    case ErrorCode::kDegenerateEnsemble: return "degenerate_ensemble";
    case ErrorCode::kBadMagic: return "bad_magic";
    case ErrorCode::kUnsupportedVersion: return "unsupported_version";
    case ErrorCode::kTruncated: return "truncated";
    case ErrorCode::kFormat: return "format";
    case ErrorCode::kIo: return "io";
    case ErrorCode::kNotFound: return "not_found";
    case ErrorCode::kQuery: return "query";
    case ErrorCode::kUnavailable: return "unavailable";
  }
  return "unknown";
}

/// Every failure raised by the library carries a machine-readable code so
/// the CLI and HTTP layers can map it to an exit status or response code.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

/// Numeric failures remember where they happened (encoder layer or
/// training step); -1 means "not applicable".
class NumericError : public Error {
 public:
  NumericError(const std::string& message, int layer = -1, long step = -1)
      : Error(ErrorCode::kNumeric, message), layer_(layer), step_(step) {}

  int layer() const noexcept { return layer_; }
  long step() const noexcept { return step_; }

 private:
  int layer_;
  long step_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
  throw Error(code, message);
}

}  // namespace lidarclip
