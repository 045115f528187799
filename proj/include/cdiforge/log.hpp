#pragma once

#include <cstdio>

namespace cdiforge {

enum class LogLevel { error = 0, warn = 1, info = 2, debug = 3 };

// Parsed once from CDI_FORGE_LOG (error|warn|info|debug); defaults to warn.
LogLevel log_level();

bool log_enabled(LogLevel lvl);
void log_message(LogLevel lvl, const char* fmt, ...) __attribute__((format(printf, 2, 3)));

}  // namespace cdiforge

#define CDI_LOG_ERROR(...) ::cdiforge::log_message(::cdiforge::LogLevel::error, __VA_ARGS__)
#define CDI_LOG_WARN(...) ::cdiforge::log_message(::cdiforge::LogLevel::warn, __VA_ARGS__)
#define CDI_LOG_INFO(...) ::cdiforge::log_message(::cdiforge::LogLevel::info, __VA_ARGS__)
#define CDI_LOG_DEBUG(...) ::cdiforge::log_message(::cdiforge::LogLevel::debug, __VA_ARGS__)
