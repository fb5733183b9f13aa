#pragma once

#include <stdexcept>
#include <string>

namespace cdrop {

// Error taxonomy shared by the library and the CLI; the CLI maps each class
// to a distinct exit code.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DimensionError : Error { using Error::Error; };  // shape mismatches
struct ArgumentError : Error { using Error::Error; };   // bad scalar arguments
struct StateError : Error { using Error::Error; };      // calls out of order
struct ConfigError : Error { using Error::Error; };     // invalid configuration
struct DataError : Error { using Error::Error; };       // dataset content problems
struct FormatError : Error { using Error::Error; };     // malformed files

// Divergence during optimisation; carries the step at which it was detected.
struct TrainingError : Error {
  long long step;
  TrainingError(const std::string& what, long long step_)
      : Error(what + " (step " + std::to_string(step_) + ")"), step(step_) {}
};

}  // namespace cdrop
