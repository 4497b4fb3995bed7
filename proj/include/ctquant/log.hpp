// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <spdlog/spdlog.h>

namespace ctquant {

/// Shared logger; level comes from the CTQUANT_LOG environment variable
/// (trace, debug, info, warn, error, off). Defaults to warn.
spdlog::logger& logger();

}  // namespace ctquant
