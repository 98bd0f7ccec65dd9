#include "epanet/errors.hpp"

#include <iostream>

namespace epanet {

WarningLog& WarningLog::instance() {
  static WarningLog log;
  return log;
}

void WarningLog::emit(std::string message) {
  std::lock_guard lock(mutex_);
  if (echo_) std::cerr << "warning: " << message << '\n';
  messages_.push_back(std::move(message));
}

std::vector<std::string> WarningLog::drain() {
  std::lock_guard lock(mutex_);
  return std::exchange(messages_, {});
}

std::size_t WarningLog::count() const {
  std::lock_guard lock(mutex_);
  return messages_.size();
}

void WarningLog::set_echo(bool echo) {
  std::lock_guard lock(mutex_);
  echo_ = echo;
}

}  // namespace epanet
