#pragma once

#include <stdexcept>
#include <string>

namespace dpt {

// Every error raised by the library derives from Error so callers can catch
// one type; the subclasses map onto the CLI exit codes.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DimensionError : Error {
  using Error::Error;
};

// A softmax row, truncated row or singular-value spectrum with no mass left.
struct DegenerateError : Error {
  using Error::Error;
};

struct ContractError : Error {
  using Error::Error;
};

struct ConfigError : Error {
  using Error::Error;
};

struct InputError : Error {
  using Error::Error;
};

struct ParseError : InputError {
  using InputError::InputError;
};

struct NumericError : Error {
  using Error::Error;
};

struct DivergenceError : NumericError {
  DivergenceError(long step, const std::string& what)
      : NumericError("training diverged at step " + std::to_string(step) + ": " + what), step(step) {}
  long step;
};

}  // namespace dpt
