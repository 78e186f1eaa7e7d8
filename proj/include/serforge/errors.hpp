#pragma once

#include <stdexcept>

namespace serforge {

// Exit-code contract: usage errors map to 1, data errors to 2, numerical
// failures to 3. Contract violations (bad shapes, bad arguments) use
// std::invalid_argument and map to 2 at the CLI boundary.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace serforge
