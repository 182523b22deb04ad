#pragma once

#include <stdexcept>
#include <string>

namespace asap {

// Bad user-supplied configuration (zero capacity, indivisible batch, ...).
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Caller broke an operation contract (masked action, non-scalar loss, ...).
struct ContractError : std::logic_error {
  using std::logic_error::logic_error;
};

// Tensor shape disagreement; message names both shapes.
struct ShapeError : std::logic_error {
  using std::logic_error::logic_error;
};

// A file failed structural parsing.
struct ParseError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Parsed data violates a domain invariant.
struct ValidationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Filesystem failure (open/write/rename).
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Checkpoint/config mismatch or corrupted container.
struct IncompatibleError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Non-finite values where finite ones are required.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace asap
