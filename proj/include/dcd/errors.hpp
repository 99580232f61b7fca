#pragma once

#include <stdexcept>

namespace dcd {

// Error classes the CLI maps onto its exit-code contract.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DependencyError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace dcd
