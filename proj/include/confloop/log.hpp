#pragma once

#include <functional>
#include <string>
#include <string_view>

namespace confloop::log {

enum class Level { debug, info, warn, error };

struct Event {
    Level level;
    std::string component;
    std::string message;
};

using Sink = std::function<void(const Event&)>;

/// Replace the process-wide sink; returns the previous one. The default sink
/// writes warnings and errors to stderr.
Sink set_sink(Sink sink);

void emit(Level level, std::string_view component, std::string_view message);

inline void debug(std::string_view c, std::string_view m) { emit(Level::debug, c, m); }
inline void info(std::string_view c, std::string_view m) { emit(Level::info, c, m); }
inline void warn(std::string_view c, std::string_view m) { emit(Level::warn, c, m); }
inline void error(std::string_view c, std::string_view m) { emit(Level::error, c, m); }

std::string_view level_name(Level level);

}  // namespace confloop::log
