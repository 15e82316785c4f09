#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace nvrl {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Shape or extent disagreement between tensors.
struct DimensionError : Error {
  using Error::Error;
};

// API contract violated by the caller (non-scalar loss, mask/data
// inconsistency, symbol outside the declared alphabet, ...).
struct ContractError : Error {
  using Error::Error;
};

// A parameter value is out of its valid domain (nonpositive step, sigma <= 0).
struct ParamError : Error {
  using Error::Error;
};

// Inconsistent model configuration.
struct ConfigError : Error {
  using Error::Error;
};

// Malformed, truncated or corrupt coded stream.
struct StreamError : Error {
  using Error::Error;
};

struct TrainingDiverged : Error {
  using Error::Error;
};

}  // namespace nvrl
