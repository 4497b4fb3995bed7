// SPDX-License-Identifier: Apache-2.0
#include "ctquant/error.hpp"

namespace ctquant {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::MissingFile: return "MissingFile";
    case ErrorCode::ChecksumMismatch: return "ChecksumMismatch";
    case ErrorCode::MalformedHeader: return "MalformedHeader";
    case ErrorCode::SizeMismatch: return "SizeMismatch";
    case ErrorCode::IoFailure: return "IoFailure";
    case ErrorCode::IllegalLabel: return "IllegalLabel";
    case ErrorCode::SchemaMismatch: return "SchemaMismatch";
    case ErrorCode::DimsMismatch: return "DimsMismatch";
    case ErrorCode::EmptyMask: return "EmptyMask";
    case ErrorCode::MultipleComponents: return "MultipleComponents";
    case ErrorCode::DegenerateShape: return "DegenerateShape";
    case ErrorCode::TooFewPoints: return "TooFewPoints";
    case ErrorCode::DegenerateConic: return "DegenerateConic";
    case ErrorCode::OutOfBounds: return "OutOfBounds";
    case ErrorCode::ArityMismatch: return "ArityMismatch";
    case ErrorCode::NonFiniteValue: return "NonFiniteValue";
    case ErrorCode::DuplicateScanId: return "DuplicateScanId";
    case ErrorCode::TooFewRecords: return "TooFewRecords";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::NonFinite: return "NonFinite";
    case ErrorCode::NotScalarLoss: return "NotScalarLoss";
    case ErrorCode::VersionMismatch: return "VersionMismatch";
    case ErrorCode::HashMismatch: return "HashMismatch";
    case ErrorCode::NoPositives: return "NoPositives";
    case ErrorCode::InvalidArgument: return "InvalidArgument";
  }
  return "Unknown";
}

}  // namespace ctquant
