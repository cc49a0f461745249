#pragma once

#include <stdexcept>
#include <string>

namespace iconsel {

// Error categories map one-to-one onto CLI exit codes.
enum class ErrorKind {
  Config = 2,
  Data = 3,
  Backend = 4,
  Incomplete = 5,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }
  int exit_code() const noexcept { return static_cast<int>(kind_); }

 private:
  ErrorKind kind_;
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error(ErrorKind::Config, what) {}
};

class DataError : public Error {
 public:
  explicit DataError(const std::string& what) : Error(ErrorKind::Data, what) {}
};

class BackendError : public Error {
 public:
  explicit BackendError(const std::string& what) : Error(ErrorKind::Backend, what) {}
};

// Retryable: connection failures, timeouts, 5xx responses.
class TransportError : public BackendError {
 public:
  using BackendError::BackendError;
};

// Never retried.
class TokenizationMismatch : public BackendError {
 public:
  using BackendError::BackendError;
};

class ContextOverflow : public BackendError {
 public:
  using BackendError::BackendError;
};

class IncompleteRun : public Error {
 public:
  explicit IncompleteRun(const std::string& what) : Error(ErrorKind::Incomplete, what) {}
};

}  // namespace iconsel
