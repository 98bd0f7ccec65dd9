#pragma once

#include <cstddef>
#include <mutex>
#include <stdexcept>
#include <string>
#include <vector>

namespace epanet {

/// Incompatible shapes, widths or options at construction or call time.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A tensor carried NaN/Inf into or out of a module.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Process-wide sink for non-fatal diagnostics (skipped label lines,
/// degenerate targets, undersized feature maps). Thread-safe.
class WarningLog {
 public:
  static WarningLog& instance();

  void emit(std::string message);
  std::vector<std::string> drain();
  std::size_t count() const;
  void set_echo(bool echo);

 private:
  WarningLog() = default;
  mutable std::mutex mutex_;
  std::vector<std::string> messages_;
  bool echo_ = false;
};

inline void warn(std::string message) { WarningLog::instance().emit(std::move(message)); }

}  // namespace epanet
