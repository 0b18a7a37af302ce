#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace bandvq {

/// Root of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes disagree; the message names the op and both shapes.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Arguments outside an op's domain (bad index, bad band edges, ...).
class ArgumentError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf encountered where finite values are required.
class NumericalError : public Error {
 public:
  using Error::Error;
};

/// Malformed file content: wrong magic, bad field value.
class FormatError : public Error {
 public:
  using Error::Error;
};

class VersionError : public FormatError {
 public:
  using FormatError::FormatError;
};

class TruncationError : public FormatError {
 public:
  TruncationError(const std::string& what, std::uint64_t expected,
                  std::uint64_t actual)
      : FormatError(what + ": expected " + std::to_string(expected) +
                    " bytes, got " + std::to_string(actual)),
        expected_(expected),
        actual_(actual) {}

  std::uint64_t expected() const { return expected_; }
  std::uint64_t actual() const { return actual_; }

 private:
  std::uint64_t expected_;
  std::uint64_t actual_;
};

class ChecksumError : public FormatError {
 public:
  using FormatError::FormatError;
};

class FingerprintError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A required input (file, checkpoint, band tokenizer) does not exist.
class MissingInputError : public Error {
 public:
  using Error::Error;
};

}  // namespace bandvq
