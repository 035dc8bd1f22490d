#pragma once

#include <stdexcept>
#include <string>

namespace invcert {

// Base for every error raised by the library. `field` names the offending
// input (config key, argument, file) and `hint` a remediation, both optional.
class Error : public std::runtime_error {
 public:
  Error(const std::string& what, std::string field = {}, std::string hint = {})
      : std::runtime_error(what), field_(std::move(field)), hint_(std::move(hint)) {}

  const std::string& field() const noexcept { return field_; }
  const std::string& hint() const noexcept { return hint_; }
  virtual const char* kind() const noexcept { return "error"; }

 private:
  std::string field_;
  std::string hint_;
};

// Bad arguments, schema violations, missing inputs. CLI exit code 1.
class ValidationError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "validation"; }
};

// Operation not supported by the given classifier (e.g. gradients of a lookup table).
class CapabilityError : public ValidationError {
 public:
  using ValidationError::ValidationError;
  const char* kind() const noexcept override { return "capability"; }
};

// Numeric failure at run time. CLI exit code 2.
class NumericError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "numeric"; }
};

// Input is well-formed but degenerate (zero mass, no confusion signal).
class DegenerateError : public NumericError {
 public:
  using NumericError::NumericError;
  const char* kind() const noexcept override { return "degenerate"; }
};

class TrainingError : public NumericError {
 public:
  using NumericError::NumericError;
  const char* kind() const noexcept override { return "training"; }
};

// The top label of a probability vector is outside the leaf's label subset.
class RoutingMismatch : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "routing"; }
};

}  // namespace invcert
