#pragma once

#include <stdexcept>
#include <string>

namespace malaudit {

// Error taxonomy mirrors the CLI exit-code contract:
//   UsageError -> 1, DataError -> 2, ComputeError -> 3.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad invocation: contradictory flags, malformed flag values.
class UsageError : public Error {
 public:
  using Error::Error;
};

// Bad inputs: parse failures, validation failures, insufficient or empty
// sample ranges, catalog mismatches.
class DataError : public Error {
 public:
  using Error::Error;
};

// Failures while computing or writing: non-finite losses, singular local
// regressions, I/O errors.
class ComputeError : public Error {
 public:
  using Error::Error;
};

}  // namespace malaudit
