#pragma once

#include <stdexcept>
#include <string>

namespace mcmfh {

// Dimension or shape contract violated by an operation's inputs.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Invalid hyperparameter, configuration key, or command-line value.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Input values outside an operation's domain (e.g. unnormalized probabilities).
class InputError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Unreadable, corrupt, or inconsistent data files.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Non-finite values produced during computation.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace mcmfh
