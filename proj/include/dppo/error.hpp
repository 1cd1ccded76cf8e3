#pragma once

#include <stdexcept>
#include <string>

namespace dppo {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed arguments: out-of-range ids, nonpositive probabilities, bad shapes.
class InvalidInput : public Error {
 public:
  using Error::Error;
};

// An enumeration would exceed its configured cap.
class CapacityError : public Error {
 public:
  using Error::Error;
};

// Two inputs that must agree do not (e.g. a selected prompt without a threshold).
class ConsistencyError : public Error {
 public:
  using Error::Error;
};

// Argument outside the mathematical domain of a closed-form expression.
class DomainError : public Error {
 public:
  using Error::Error;
};

// A pruning plan left no prompt to estimate a gradient from.
class DegenerateBatch : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  ConfigError(int line, const std::string& message)
      : Error(line > 0 ? "line " + std::to_string(line) + ": " + message
                       : message),
        line_(line) {}

  int line() const { return line_; }

 private:
  int line_;
};

}  // namespace dppo
