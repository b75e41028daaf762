#pragma once

#include <stdexcept>
#include <string>

namespace igpk {

// Dimension/shape violations. Messages carry both shapes.
class ShapeError : public std::invalid_argument {
 public:
  explicit ShapeError(const std::string& msg) : std::invalid_argument(msg) {}
};

// Invalid configuration values or cross-field violations.
class ConfigError : public std::invalid_argument {
 public:
  explicit ConfigError(const std::string& msg) : std::invalid_argument(msg) {}
};

// Non-finite values, degenerate denominators, empty reductions.
class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// Container / file format failures, one kind per failure class.
enum class IoErrc {
  open_failed,
  write_failed,
  bad_magic,
  bad_version,
  truncated,
  bounds,
  parse,
  duplicate_name,
};

inline const char* to_string(IoErrc e) {
  switch (e) {
    case IoErrc::open_failed: return "open_failed";
    case IoErrc::write_failed: return "write_failed";
    case IoErrc::bad_magic: return "bad_magic";
    case IoErrc::bad_version: return "bad_version";
    case IoErrc::truncated: return "truncated";
    case IoErrc::bounds: return "bounds";
    case IoErrc::parse: return "parse";
    case IoErrc::duplicate_name: return "duplicate_name";
  }
  return "unknown";
}

class IoError : public std::runtime_error {
 public:
  IoError(IoErrc kind, const std::string& msg)
      : std::runtime_error(std::string(to_string(kind)) + ": " + msg), kind_(kind) {}
  IoErrc kind() const { return kind_; }

 private:
  IoErrc kind_;
};

}  // namespace igpk
