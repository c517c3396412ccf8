#pragma once

#include <stdexcept>
#include <string>

namespace avloc {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Mismatched tensor shapes; message always carries both shapes.
struct ShapeError : Error {
    using Error::Error;
};

// Invalid configuration value or combination.
struct ConfigError : Error {
    using Error::Error;
};

// Violated API contract (e.g. backward on a non-scalar loss).
struct ContractError : Error {
    using Error::Error;
};

// Malformed file on disk; message names the byte offset where parsing failed.
struct FormatError : Error {
    using Error::Error;
};

struct IoError : Error {
    using Error::Error;
};

// NaN/Inf produced by an op; message names the op.
struct NumericError : Error {
    using Error::Error;
};

// Checkpoint incompatible with the current model configuration.
struct VersionError : Error {
    using Error::Error;
};

struct LookupError : Error {
    using Error::Error;
};

} // namespace avloc
