#include "sprune/log.hpp"

#include <iostream>
#include <mutex>

namespace sprune {

namespace {

void default_sink(LogLevel level, std::string_view message) {
  if (level == LogLevel::warning) std::cerr << "warning: " << message << '\n';
}

std::mutex& sink_mutex() {
  static std::mutex m;
  return m;
}

LogSink& current_sink() {
  static LogSink sink = default_sink;
  return sink;
}

}  // namespace

LogSink set_log_sink(LogSink sink) {
  std::lock_guard lock(sink_mutex());
  LogSink previous = std::move(current_sink());
  current_sink() = sink ? std::move(sink) : LogSink(default_sink);
  return previous;
}

void log(LogLevel level, std::string_view message) {
  std::lock_guard lock(sink_mutex());
  current_sink()(level, message);
}

}  // namespace sprune
