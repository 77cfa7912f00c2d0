// Copyright 2026 The tfup Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace tfup {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid configuration or caller-supplied arguments.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Operands whose shapes or dimensions do not line up.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Inconsistent or malformed data (duplicate ids, missing labels, empty cache).
class DataError : public Error {
 public:
  using Error::Error;
};

// Non-finite values, non-stochastic rows, zero-norm vectors.
class NumericalError : public Error {
 public:
  using Error::Error;
};

// On-disk format violation. `offset` is the byte position where decoding failed.
class FormatError : public DataError {
 public:
  FormatError(const std::string& what, std::uint64_t offset)
      : DataError(what + " (at byte offset " + std::to_string(offset) + ")"),
        detail_(what),
        offset_(offset) {}

  std::uint64_t offset() const noexcept { return offset_; }
  // Message without the offset suffix.
  const std::string& detail() const noexcept { return detail_; }

 private:
  std::string detail_;
  std::uint64_t offset_;
};

}  // namespace tfup
