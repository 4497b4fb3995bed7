// SPDX-License-Identifier: Apache-2.0
//
// The `ctquant` command line: extract, featurize, train, predict, explain,
// evaluate and phantom.
#pragma once

#include <array>
#include <ostream>
#include <string>
#include <string_view>
#include <vector>

#include "ctquant/error.hpp"

namespace ctquant::cli {

inline constexpr std::string_view kToolVersion = "0.1.0";

/// Process exit codes, one per error class.
enum ExitCode : int {
  kOk = 0,
  kUnexpected = 1,
  kUsage = 2,
  kIo = 3,          // MissingFile, IoFailure
  kCorrupt = 4,     // checksum, hash, version or header problems
  kMaskMismatch = 5,  // labels, schema or grid disagree with the volume
  kGeometry = 6,    // a shape operation could not run
  kData = 7,        // feature tables, labels and arguments
  kPartial = 8,     // some scans of a batch failed
};

int exit_code_for(ErrorCode code);

/// Runs one command. `args` excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

struct ContributionGroup {
  std::string_view name;
  std::vector<std::string_view> members;
};

/// Groups used by `explain`; every attribution name belongs to exactly one.
const std::vector<ContributionGroup>& contribution_groups();

}  // namespace ctquant::cli
