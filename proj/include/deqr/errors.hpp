#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace deqr {

// Shape rule violation. The message names the offending operand.
class DimensionError : public std::runtime_error {
 public:
  explicit DimensionError(const std::string& msg) : std::runtime_error(msg) {}
};

// Non-finite values where finite ones are required.
class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// API contract violated by the caller (wrong node kind, mismatched spec, ...).
class ContractError : public std::runtime_error {
 public:
  explicit ContractError(const std::string& msg) : std::runtime_error(msg) {}
};

class IndexError : public std::runtime_error {
 public:
  explicit IndexError(const std::string& msg) : std::runtime_error(msg) {}
};

// Fixed-point iteration produced a non-finite state.
class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(std::size_t iteration, const std::string& msg)
      : std::runtime_error(msg), iteration_(iteration) {}
  std::size_t iteration() const noexcept { return iteration_; }

 private:
  std::size_t iteration_;
};

class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

class IoError : public std::runtime_error {
 public:
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

// Checkpoint loading failures, one type per failure mode.
class BadMagicError : public IoError {
 public:
  explicit BadMagicError(const std::string& msg) : IoError(msg) {}
};

class VersionMismatchError : public IoError {
 public:
  VersionMismatchError(std::uint32_t found, std::uint32_t expected,
                       const std::string& msg)
      : IoError(msg), found_(found), expected_(expected) {}
  std::uint32_t found() const noexcept { return found_; }
  std::uint32_t expected() const noexcept { return expected_; }

 private:
  std::uint32_t found_;
  std::uint32_t expected_;
};

class TruncationError : public IoError {
 public:
  explicit TruncationError(const std::string& msg) : IoError(msg) {}
};

}  // namespace deqr
