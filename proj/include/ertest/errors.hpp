#pragma once

#include <stdexcept>
#include <string>

namespace ertest {

// Base of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Operand shapes do not conform for an op.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Invalid argument values (ranges, sizes, empty inputs).
class ValueError : public Error {
 public:
  using Error::Error;
};

// Loss or parameter became NaN/Inf.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Malformed input files (JSONL, CSV, lexicons, checkpoints).
class DataError : public Error {
 public:
  using Error::Error;
};

// Invalid run configuration. The CLI maps this to exit code 2.
class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace ertest
