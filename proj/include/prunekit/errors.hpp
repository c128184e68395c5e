#pragma once

#include <stdexcept>
#include <string>

namespace prunekit {

// Base for all prunekit failures.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Dimension / width mismatches between tensors, stats and masks.
struct ShapeError : Error {
    using Error::Error;
};

// Serialized file violations: bad magic, truncation, inconsistent headers.
struct FormatError : Error {
    using Error::Error;
};

// Invalid configuration or usage (maps to CLI exit code 2).
struct ConfigError : Error {
    using Error::Error;
};

// Bad runtime inputs: out-of-range tokens, short corpora, insufficient data.
struct InputError : Error {
    using Error::Error;
};

} // namespace prunekit
