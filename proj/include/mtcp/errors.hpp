#pragma once

#include <stdexcept>
#include <string>

namespace mtcp {

// Shape disagreement between operands.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Invalid hyper-parameter or layer configuration.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// A NaN or Inf appeared in a forward value or a gradient.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Operation invoked in the wrong state (no tape, missing stage features, ...).
class StateError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace mtcp
