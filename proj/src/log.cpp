#include "sabone/log.hpp"

#include <atomic>
#include <chrono>
#include <iostream>
#include <mutex>

namespace sabone::log {

namespace {
std::atomic<Level> g_min{Level::Info};
std::mutex g_mutex;

const char* name(Level l) {
    switch (l) {
        case Level::Debug: return "debug";
        case Level::Info: return "info";
        case Level::Warn: return "warn";
        case Level::Error: return "error";
    }
    return "info";
}
}  // namespace

void set_min_level(Level level) { g_min = level; }

void emit(Level level, std::string_view msg, const nlohmann::json& fields) {
    if (level < g_min.load()) return;
    nlohmann::json line = nlohmann::json::object();
    const auto now = std::chrono::system_clock::now().time_since_epoch();
    line["ts"] = std::chrono::duration<double>(now).count();
    line["level"] = name(level);
    line["msg"] = msg;
    if (fields.is_object())
        for (auto it = fields.begin(); it != fields.end(); ++it) line[it.key()] = it.value();
    const auto text = line.dump(-1, ' ', false, nlohmann::json::error_handler_t::replace);
    std::lock_guard lock(g_mutex);
    std::cerr << text << '\n';
}

}  // namespace sabone::log
