#pragma once

#include <stdexcept>
#include <string>

namespace peftkit {

// Base class for everything this library throws.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Tensor shape / dimension mismatches.
struct ShapeError : Error {
    using Error::Error;
};

// API misuse: non-scalar backward seed, missing gradient, mismatched lengths.
struct UsageError : Error {
    using Error::Error;
};

// Invalid user-facing inputs (CLI flags, example fields, sequence length).
struct ValidationError : Error {
    using Error::Error;
};

// Invalid hyperparameters or configuration files.
struct ConfigError : Error {
    using Error::Error;
};

// Adapter built against a different base configuration.
struct CompatError : Error {
    using Error::Error;
};

// Malformed binary files (magic, version, checksum, truncation).
struct FormatError : Error {
    using Error::Error;
};

// Malformed dataset records; message carries the line number.
struct DataError : Error {
    using Error::Error;
};

// Numeric failure during training (NaN / inf loss).
struct NumericError : Error {
    using Error::Error;
};

} // namespace peftkit
