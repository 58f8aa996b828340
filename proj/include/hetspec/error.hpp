#pragma once

#include <stdexcept>
#include <string>

namespace hetspec {

// Root of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A caller broke an operation's precondition (bad shape, empty range, ...).
class ContractViolation : public Error {
 public:
  using Error::Error;
};

// Context window or cache capacity exceeded.
class CapacityError : public Error {
 public:
  using Error::Error;
};

// Inconsistent configuration: plan/model shape mismatch, tree/candidate mismatch.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Unusable input data (empty calibration set, invalid accuracy table).
class InputError : public Error {
 public:
  using Error::Error;
};

class InvalidTableError : public InputError {
 public:
  using InputError::InputError;
};

// File could not be opened or read.
class IoError : public Error {
 public:
  using Error::Error;
};

// Malformed serialized artifact.
class FormatError : public Error {
 public:
  using Error::Error;
};

class BadMagicError : public FormatError {
 public:
  using FormatError::FormatError;
};

// Serialized tensor extends past the end of the file.
class TruncatedError : public FormatError {
 public:
  TruncatedError(const std::string& tensor, const std::string& what)
      : FormatError(what), tensor_(tensor) {}
  const std::string& tensor() const noexcept { return tensor_; }

 private:
  std::string tensor_;
};

// Stored tensor shape disagrees with the model configuration.
class ShapeMismatchError : public FormatError {
 public:
  ShapeMismatchError(const std::string& tensor, const std::string& what)
      : FormatError(what), tensor_(tensor) {}
  const std::string& tensor() const noexcept { return tensor_; }

 private:
  std::string tensor_;
};

namespace detail {

inline void require(bool ok, const std::string& msg) {
  if (!ok) throw ContractViolation(msg);
}

}  // namespace detail
}  // namespace hetspec
