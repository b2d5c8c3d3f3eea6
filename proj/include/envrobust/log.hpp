#ifndef ENVROBUST_LOG_HPP_
#define ENVROBUST_LOG_HPP_

#include <spdlog/spdlog.h>

namespace envrobust {

inline constexpr const char* kLogEnvVar = "ENVROBUST_LOG";

/// Sets the global spdlog level from ENVROBUST_LOG (trace, debug, info, warn,
/// error, critical, off). Defaults to warn so library code stays quiet.
void configure_logging();

}  // namespace envrobust

#endif  // ENVROBUST_LOG_HPP_
