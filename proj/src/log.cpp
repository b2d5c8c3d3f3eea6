#include "envrobust/log.hpp"

#include <cstdlib>
#include <string>

#include <spdlog/sinks/stdout_color_sinks.h>

namespace envrobust {

void configure_logging() {
  auto logger = spdlog::get("envrobust");
  if (!logger) {
    logger = spdlog::stderr_color_mt("envrobust");
    logger->set_pattern("[%H:%M:%S] [%^%l%$] %v");
  }
  spdlog::set_default_logger(logger);
  spdlog::level::level_enum level = spdlog::level::warn;
  if (const char* env = std::getenv(kLogEnvVar)) {
    const auto parsed = spdlog::level::from_str(env);
    // from_str maps unknown names to off; only accept "off" when spelled out.
    if (parsed != spdlog::level::off || std::string(env) == "off") level = parsed;
  }
  spdlog::set_level(level);
}

}  // namespace envrobust
