#include "confloop/log.hpp"

#include <iostream>
#include <mutex>

namespace confloop::log {
namespace {

std::mutex& sink_mutex() {
    static std::mutex m;
    return m;
}

void default_sink(const Event& e) {
    if (e.level < Level::warn) return;
    std::cerr << "[" << level_name(e.level) << "] " << e.component << ": " << e.message << '\n';
}

Sink& current() {
    static Sink sink = default_sink;
    return sink;
}

}  // namespace

std::string_view level_name(Level level) {
    switch (level) {
        case Level::debug: return "debug";
        case Level::info: return "info";
        case Level::warn: return "warn";
        case Level::error: return "error";
    }
    return "unknown";
}

Sink set_sink(Sink sink) {
    std::lock_guard lock(sink_mutex());
    Sink previous = std::move(current());
    current() = sink ? std::move(sink) : Sink(default_sink);
    return previous;
}

void emit(Level level, std::string_view component, std::string_view message) {
    std::lock_guard lock(sink_mutex());
    current()(Event{level, std::string(component), std::string(message)});
}

}  // namespace confloop::log
