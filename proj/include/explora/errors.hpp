#pragma once

#include <stdexcept>
#include <string>

namespace explora {

// Error taxonomy. Every throwing path in the library uses one of these so
// callers (and the CLI exit-code mapping) can tell usage, data and numeric
// failures apart without string matching.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Tensor/argument shapes do not line up.
struct ShapeError : Error {
    using Error::Error;
};

// A precondition on an argument value was violated.
struct ContractError : Error {
    using Error::Error;
};

// NaN/Inf or an otherwise numerically invalid state was encountered.
struct NumericError : Error {
    using Error::Error;
};

// An object was used in a state it does not support (e.g. double injection).
struct StateError : Error {
    using Error::Error;
};

// Two artifacts that must match do not (config hash, parameter tree, ...).
struct CompatError : Error {
    using Error::Error;
};

// Malformed or inconsistent input data.
struct DataError : Error {
    using Error::Error;
};

// Filesystem-level failure.
struct IoError : Error {
    using Error::Error;
};

} // namespace explora
