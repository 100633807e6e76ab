#pragma once

#include <stdexcept>
#include <string>

namespace tsasr {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Shape or length mismatch between operands.
struct DimensionError : Error {
    using Error::Error;
};

// Malformed external input (RTTM lines, JSON records, label sets).
struct ParseError : Error {
    using Error::Error;
};

// Unknown or invalid configuration key/value.
struct ConfigError : Error {
    using Error::Error;
};

// NaN/Inf encountered where finite values are required.
struct NumericError : Error {
    using Error::Error;
};

// Label cannot be aligned to the available frames.
struct InfeasibleLabelError : Error {
    using Error::Error;
};

// Sequence exceeds a fixed model capacity.
struct CapacityError : Error {
    using Error::Error;
};

// Empty or otherwise unusable caller-supplied data.
struct InputError : Error {
    using Error::Error;
};

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw Error(msg);
}

inline void require_dim(bool cond, const std::string& msg) {
    if (!cond) throw DimensionError(msg);
}

}  // namespace tsasr
