#pragma once

#include <stdexcept>
#include <string>

namespace spruft {

// Shapes that cannot be combined.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// A caller violated an operation's precondition (bad index, missing class, ...).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Invalid experiment or model configuration.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Training produced a non-finite loss.
class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace spruft
