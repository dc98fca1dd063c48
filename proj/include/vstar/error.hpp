#pragma once

#include <stdexcept>
#include <string>

namespace vstar {

// Every error raised by the library derives from Error so callers (the CLI in
// particular) can map categories onto exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual const char* kind() const noexcept { return "runtime"; }
};

class InvalidArgument : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "invalid-argument"; }
};

class ConfigError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "config"; }
};

class BudgetExceeded : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "budget-exceeded"; }
};

class EmptyBucket : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "empty-bucket"; }
};

class DegenerateRatio : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "degenerate-ratio"; }
};

class InternalError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "internal"; }
};

}  // namespace vstar
