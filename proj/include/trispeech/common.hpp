#ifndef TRISPEECH_COMMON_HPP
#define TRISPEECH_COMMON_HPP

#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace trispeech {

// Error taxonomy. The CLI maps ConfigError/DataError to exit code 2,
// UsageError to 1, everything else to 3.
struct ShapeError : std::runtime_error {
  explicit ShapeError(const std::string& m) : std::runtime_error("shape error: " + m) {}
};
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& m) : std::runtime_error("config error: " + m) {}
};
struct ContractError : std::runtime_error {
  explicit ContractError(const std::string& m) : std::runtime_error("contract error: " + m) {}
};
struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& m) : std::runtime_error("numeric error: " + m) {}
};
struct IoError : std::runtime_error {
  explicit IoError(const std::string& m) : std::runtime_error("io error: " + m) {}
};
struct DataError : std::runtime_error {
  explicit DataError(const std::string& m) : std::runtime_error("data error: " + m) {}
};
struct UsageError : std::runtime_error {
  explicit UsageError(const std::string& m) : std::runtime_error(m) {}
};

inline std::string shape_str(const std::vector<int64_t>& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

enum class LogLevel { kError = 0, kInfo = 1, kDebug = 2 };

// Level comes from USR_LOG={error|info|debug}; defaults to info.
inline LogLevel log_level() {
  static LogLevel lvl = [] {
    const char* e = std::getenv("USR_LOG");
    if (!e) return LogLevel::kInfo;
    std::string s(e);
    if (s == "error") return LogLevel::kError;
    if (s == "debug") return LogLevel::kDebug;
    return LogLevel::kInfo;
  }();
  return lvl;
}

inline void log_msg(LogLevel lvl, const std::string& msg) {
  if (static_cast<int>(lvl) > static_cast<int>(log_level())) return;
  const char* tag = lvl == LogLevel::kError ? "error" : (lvl == LogLevel::kInfo ? "info" : "debug");
  std::fprintf(stderr, "[%s] %s\n", tag, msg.c_str());
}

inline void log_error(const std::string& m) { log_msg(LogLevel::kError, m); }
inline void log_info(const std::string& m) { log_msg(LogLevel::kInfo, m); }
inline void log_debug(const std::string& m) { log_msg(LogLevel::kDebug, m); }

}  // namespace trispeech

#endif  // TRISPEECH_COMMON_HPP
