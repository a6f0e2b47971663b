#pragma once

#include <stdexcept>
#include <string>

namespace dlrt {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Dimension mismatch between operands.
struct ShapeError : Error {
  using Error::Error;
};

// Non-finite values, violated positivity, and similar numeric breakdown.
struct NumericError : Error {
  using Error::Error;
};

// cond(S_V) past the double-precision cliff in the factored momentum flow.
struct StiffnessError : NumericError {
  using NumericError::NumericError;
};

struct ConfigError : Error {
  using Error::Error;
};

struct IoError : Error {
  using Error::Error;
};

// Checkpoint fails structural or orthonormality validation on load.
struct IntegrityError : IoError {
  using IoError::IoError;
};

}  // namespace dlrt
