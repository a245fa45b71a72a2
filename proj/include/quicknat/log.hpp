#pragma once

#include <string_view>

namespace quicknat {

enum class LogLevel { debug, info, warning, error, silent };

void set_log_level(LogLevel level);
LogLevel log_level();

void log_info(std::string_view message);
void log_warning(std::string_view message);

}  // namespace quicknat
