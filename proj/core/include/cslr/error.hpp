#pragma once

#include <stdexcept>
#include <string>

namespace cslr {

// Base class for everything thrown by this library.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Shape or extent disagreement between operands.
struct DimensionError : Error {
  using Error::Error;
};

// Invalid configuration value (hyperparameter out of range, even kernel, ...).
struct ConfigError : Error {
  using Error::Error;
};

// Non-finite values where finite math is required.
struct NumericError : Error {
  using Error::Error;
};

// API misuse: non-scalar loss, consumed tape, and similar contract breaks.
struct ContractError : Error {
  using Error::Error;
};

// Differentiation-graph problems: detached loss, foreign tape.
struct GraphError : Error {
  using Error::Error;
};

// Sequence-length disagreement between paired streams.
struct AlignmentError : Error {
  using Error::Error;
};

// Missing or malformed input data (manifests, stream files, vocabularies).
struct DataError : Error {
  using Error::Error;
};

// Corrupt serialized state (checksum or truncation failures).
struct IntegrityError : Error {
  using Error::Error;
};

// Well-formed serialized state that cannot be used here (version or shape).
struct IncompatibilityError : Error {
  using Error::Error;
};

struct IoError : Error {
  using Error::Error;
};

}  // namespace cslr
