#pragma once

#include <string_view>

#include <nlohmann/json.hpp>

namespace sabone::log {

enum class Level { Debug, Info, Warn, Error };

/// Emits one JSON object per line on stderr:
/// {"ts":..., "level":"info", "msg":..., <fields>}.
void emit(Level level, std::string_view msg, const nlohmann::json& fields = {});

inline void info(std::string_view msg, const nlohmann::json& fields = {}) { emit(Level::Info, msg, fields); }
inline void warn(std::string_view msg, const nlohmann::json& fields = {}) { emit(Level::Warn, msg, fields); }
inline void error(std::string_view msg, const nlohmann::json& fields = {}) { emit(Level::Error, msg, fields); }

/// Messages below this level are dropped. Default Info; tests raise it to
/// keep output quiet.
void set_min_level(Level level);

}  // namespace sabone::log
