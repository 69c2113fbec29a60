#pragma once

#include <iostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>

namespace neas {

/// Input tensors disagree with what a graph op expects.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A file could not be read, written, or parsed.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// The requested operation is not supported by this model (e.g. an inner
/// surface on a single-material model).
class CapabilityError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class LogLevel { debug = 0, info = 1, warn = 2, error = 3, off = 4 };

namespace detail {
inline LogLevel& log_threshold() {
  static LogLevel level = LogLevel::info;
  return level;
}
inline std::ostream*& log_stream() {
  static std::ostream* stream = &std::clog;
  return stream;
}
}  // namespace detail

inline void set_log_level(LogLevel level) { detail::log_threshold() = level; }
inline void set_log_stream(std::ostream& os) { detail::log_stream() = &os; }

inline void log(LogLevel level, std::string_view msg) {
  if (level < detail::log_threshold() || detail::log_stream() == nullptr) return;
  static constexpr const char* kTags[] = {"debug", "info", "warn", "error"};
  *detail::log_stream() << "[neas:" << kTags[static_cast<int>(level)] << "] " << msg << '\n';
}

template <typename... Args>
std::string concat(Args&&... args) {
  std::ostringstream os;
  (os << ... << std::forward<Args>(args));
  return os.str();
}

}  // namespace neas
