#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace stgaze {

// Malformed on-disk data (bad magic, truncation, version skew).
class FormatError : public std::runtime_error {
 public:
  FormatError(const std::string& what, std::size_t byte_offset)
      : std::runtime_error(what + " (at byte offset " + std::to_string(byte_offset) + ")"),
        offset_(byte_offset) {}

  std::size_t offset() const { return offset_; }

 private:
  std::size_t offset_;
};

// Non-finite values or numerically impossible requests (degenerate averages,
// NaN losses, non-finite gradients).
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Checkpoint does not match the constructed model architecture.
class CheckpointMismatch : public std::runtime_error {
 public:
  CheckpointMismatch(const std::string& what, std::string parameter)
      : std::runtime_error(what), parameter_(std::move(parameter)) {}

  const std::string& parameter() const { return parameter_; }

 private:
  std::string parameter_;
};

// Bad run configuration; carries the offending line when parsed from a file.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& what, int line = 0)
      : std::runtime_error(line > 0 ? what + " (line " + std::to_string(line) + ")" : what),
        line_(line) {}

  int line() const { return line_; }

 private:
  int line_;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace stgaze
