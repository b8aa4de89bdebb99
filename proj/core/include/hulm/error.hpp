#pragma once

#include <stdexcept>
#include <string>

namespace hulm {

// Input that violates a documented contract (bad file contents, label/objective
// mismatch, length mismatch, ...). The CLI maps this to exit code 2.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid configuration key or value. The CLI maps this to exit code 1.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Failure while computing (I/O errors writing outputs, non-finite loss, ...).
class RuntimeFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace hulm
