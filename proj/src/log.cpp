#include "cdiforge/log.hpp"

#include <cstdarg>
#include <cstdlib>
#include <cstring>

namespace cdiforge {

LogLevel log_level() {
    static LogLevel lvl = [] {
        const char* env = std::getenv("CDI_FORGE_LOG");
        if (!env) return LogLevel::warn;
        if (std::strcmp(env, "error") == 0) return LogLevel::error;
        if (std::strcmp(env, "warn") == 0) return LogLevel::warn;
        if (std::strcmp(env, "info") == 0) return LogLevel::info;
        if (std::strcmp(env, "debug") == 0) return LogLevel::debug;
        std::fprintf(stderr, "[warn] CDI_FORGE_LOG=%s not recognized, using warn\n", env);
        return LogLevel::warn;
    }();
    return lvl;
}

bool log_enabled(LogLevel lvl) { return int(lvl) <= int(log_level()); }

void log_message(LogLevel lvl, const char* fmt, ...) {
    if (!log_enabled(lvl)) return;
    static const char* names[] = {"error", "warn", "info", "debug"};
    std::fprintf(stderr, "[%s] ", names[int(lvl)]);
    va_list args;
    va_start(args, fmt);
    std::vfprintf(stderr, fmt, args);
    va_end(args);
    std::fputc('\n', stderr);
}

}  // namespace cdiforge
