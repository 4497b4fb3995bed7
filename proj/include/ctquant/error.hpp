// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace ctquant {

enum class ErrorCode {
  // file formats
  MissingFile,
  ChecksumMismatch,
  MalformedHeader,
  SizeMismatch,
  IoFailure,
  IllegalLabel,
  // biomarkers / geometry
  SchemaMismatch,
  DimsMismatch,
  EmptyMask,
  MultipleComponents,
  DegenerateShape,
  TooFewPoints,
  DegenerateConic,
  OutOfBounds,
  // features
  ArityMismatch,
  NonFiniteValue,
  DuplicateScanId,
  TooFewRecords,
  // tensor / fusion
  ShapeMismatch,
  NonFinite,
  NotScalarLoss,
  VersionMismatch,
  HashMismatch,
  // evaluation
  NoPositives,
  InvalidArgument,
};

std::string_view to_string(ErrorCode code);

/// Every library failure is reported as an Error carrying a stable code; the
/// CLI maps codes onto exit statuses.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace ctquant
