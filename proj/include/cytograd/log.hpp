#pragma once

#include <functional>
#include <iostream>
#include <mutex>
#include <string_view>
#include <utility>

namespace cytograd::log {

enum class Level { Info, Warning };

using Sink = std::function<void(Level, std::string_view)>;

namespace detail {
inline std::mutex& sink_mutex() {
  static std::mutex m;
  return m;
}
inline Sink& sink() {
  static Sink s = [](Level level, std::string_view msg) {
    std::cerr << (level == Level::Warning ? "warning: " : "") << msg << '\n';
  };
  return s;
}
}  // namespace detail

/// Replaces the process-wide message sink; returns the previous one.
inline Sink set_sink(Sink sink) {
  std::lock_guard lock(detail::sink_mutex());
  return std::exchange(detail::sink(), std::move(sink));
}

inline void emit(Level level, std::string_view msg) {
  std::lock_guard lock(detail::sink_mutex());
  if (detail::sink()) detail::sink()(level, msg);
}

inline void info(std::string_view msg) { emit(Level::Info, msg); }
inline void warn(std::string_view msg) { emit(Level::Warning, msg); }

}  // namespace cytograd::log
