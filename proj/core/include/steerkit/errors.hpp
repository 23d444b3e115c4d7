#pragma once

#include <stdexcept>
#include <string>

namespace steerkit {

// Base for everything the library throws on purpose.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Filesystem / OS level failures.
struct IoError : Error {
  using Error::Error;
};

// Corrupt or inconsistent on-disk data: bad magic, overlapping offsets,
// shape/payload mismatches, truncated files.
struct FormatError : Error {
  using Error::Error;
};

// Precondition or configuration violations: bad dimensions, unknown
// architecture labels, out-of-range indices, duplicate run ids.
struct ValidationError : Error {
  using Error::Error;
};

// Rank statistics on inputs where the statistic is undefined
// (e.g. all values tied on one side).
struct DegenerateInputError : Error {
  using Error::Error;
};

// Judge transport or parse failure after the retry budget is spent.
struct JudgeError : Error {
  using Error::Error;
};

// A pipeline stage was invoked before its inputs exist.
struct MissingDependencyError : Error {
  using Error::Error;
};

// Not enough valid samples to satisfy a required count
// (e.g. window sampling for a never-active latent).
struct InsufficientDataError : Error {
  using Error::Error;
};

}  // namespace steerkit
