#pragma once

#include <stdexcept>
#include <string>

namespace freqcoda {

// Argument/shape problems are caller bugs; data problems come from inputs on
// disk or in memory; numerical errors abort a run (CLI exit code 3).
struct InvalidShape : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct InvalidArgument : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct InvalidState : std::logic_error {
  using std::logic_error::logic_error;
};

struct InvalidData : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct IngestionError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace freqcoda
