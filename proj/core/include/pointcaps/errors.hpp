#pragma once

#include <stdexcept>
#include <string>

namespace pointcaps {

// Base class for everything this library throws on purpose.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Tensor extents or ranks do not line up.
struct ShapeError : Error {
  using Error::Error;
};

// A layer / model / run configuration is internally inconsistent.
struct ConfigError : Error {
  using Error::Error;
};

// Caller handed in data the operation cannot accept (empty cloud, bad label, ...).
struct InputError : Error {
  using Error::Error;
};

// A computation produced NaN or Inf.
struct NumericError : Error {
  using Error::Error;
};

// Misuse of the autodiff tape (backward on a detached value, ...).
struct TapeError : Error {
  using Error::Error;
};

// An API precondition unrelated to shapes was violated (non-scalar loss, ...).
struct ContractError : Error {
  using Error::Error;
};

// Text input could not be parsed; message carries the line number.
struct ParseError : Error {
  using Error::Error;
};

// Filesystem trouble: missing file, failed write.
struct IoError : Error {
  using Error::Error;
};

// Persisted artifact does not match what this build expects.
struct VersionError : Error {
  using Error::Error;
};

}  // namespace pointcaps
