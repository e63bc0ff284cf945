#pragma once

#include <stdexcept>
#include <string>

namespace dropsynth {

// Base for every error raised by the library. Callers that only care about
// "something in the pipeline failed" catch this; the CLI maps it to exit 1.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed or inconsistent input (bad shapes, out-of-range values, bad files).
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

// A file could not be read, parsed or written.
class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace dropsynth
