#include "quicknat/log.hpp"

#include <atomic>
#include <iostream>

namespace quicknat {

namespace {
std::atomic<LogLevel> g_level{LogLevel::warning};

void emit(LogLevel level, const char* tag, std::string_view message) {
  if (level < g_level.load()) return;
  std::clog << "[quicknat " << tag << "] " << message << '\n';
}
}  // namespace

void set_log_level(LogLevel level) { g_level = level; }
LogLevel log_level() { return g_level.load(); }

void log_info(std::string_view message) { emit(LogLevel::info, "info", message); }
void log_warning(std::string_view message) { emit(LogLevel::warning, "warning", message); }

}  // namespace quicknat
