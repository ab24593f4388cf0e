#pragma once

#include <stdexcept>
#include <string>

namespace steu {

/// Raised when an input violates a documented contract (bad spec, bad file,
/// shape mismatch). The CLI maps it to exit code 2.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised for command-line misuse (unknown flag, missing file, stage order).
/// The CLI maps it to exit code 1.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace steu
