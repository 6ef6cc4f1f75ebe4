#pragma once

#include <string>

namespace gklsbi {

enum class LogLevel { debug = 0, info = 1, warning = 2, error = 3, quiet = 4 };

void set_log_level(LogLevel level);
LogLevel log_level();
LogLevel parse_log_level(const std::string& name);

// Lines go to stderr, one call per line, safe across threads.
void log_message(LogLevel level, const std::string& message);
inline void log_debug(const std::string& m) { log_message(LogLevel::debug, m); }
inline void log_info(const std::string& m) { log_message(LogLevel::info, m); }
inline void log_warning(const std::string& m) { log_message(LogLevel::warning, m); }
inline void log_error(const std::string& m) { log_message(LogLevel::error, m); }

}  // namespace gklsbi
