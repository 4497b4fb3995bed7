// SPDX-License-Identifier: Apache-2.0
#include "ctquant/log.hpp"

#include <spdlog/sinks/stdout_color_sinks.h>

#include <cstdlib>
#include <memory>

namespace ctquant {

spdlog::logger& logger() {
  static std::shared_ptr<spdlog::logger> instance = [] {
    auto sink = std::make_shared<spdlog::sinks::stderr_color_sink_mt>();
    auto lg = std::make_shared<spdlog::logger>("ctquant", sink);
    lg->set_pattern("[%l] %v");
    lg->set_level(spdlog::level::warn);
    if (const char* env = std::getenv("CTQUANT_LOG"); env != nullptr && *env != '\0') {
      lg->set_level(spdlog::level::from_str(env));
    }
    return lg;
  }();
  return *instance;
}

}  // namespace ctquant
