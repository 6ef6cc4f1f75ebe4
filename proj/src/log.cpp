#include "gklsbi/log.hpp"

#include <atomic>
#include <cstdio>
#include <mutex>
#include <stdexcept>

namespace gklsbi {

namespace {

std::atomic<LogLevel> g_level{LogLevel::warning};
std::mutex g_mutex;

const char* tag(LogLevel level) {
  switch (level) {
    case LogLevel::debug: return "debug";
    case LogLevel::info: return "info";
    case LogLevel::warning: return "warning";
    case LogLevel::error: return "error";
    case LogLevel::quiet: break;
  }
  return "";
}

}  // namespace

void set_log_level(LogLevel level) { g_level = level; }
LogLevel log_level() { return g_level; }

LogLevel parse_log_level(const std::string& name) {
  if (name == "debug") return LogLevel::debug;
  if (name == "info") return LogLevel::info;
  if (name == "warning") return LogLevel::warning;
  if (name == "error") return LogLevel::error;
  if (name == "quiet") return LogLevel::quiet;
  throw std::invalid_argument("unknown log level: " + name);
}

void log_message(LogLevel level, const std::string& message) {
  if (level < g_level.load() || level == LogLevel::quiet) return;
  std::lock_guard lock(g_mutex);
  std::fprintf(stderr, "[gklsbi %s] %s\n", tag(level), message.c_str());
}

}  // namespace gklsbi
