#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace ptran {

// Error hierarchy. Every failure the library reports goes through one of
// these so callers (tests, CLI) can distinguish contract violations from
// data problems.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Shape or inner-extent mismatch in a tensor operation.
struct DimensionError : Error {
    using Error::Error;
};

// Out-of-range index (vocab id, channel, bank, ...).
struct IndexError : Error {
    using Error::Error;
};

// Precondition violated by the caller (non-scalar loss, i == j distance, ...).
struct ContractError : Error {
    using Error::Error;
};

// Malformed input file.
struct FormatError : Error {
    using Error::Error;
};

struct IoError : Error {
    using Error::Error;
};

// A softmax row with no unmasked entries.
struct DegenerateRowError : Error {
    using Error::Error;
};

// Requested feature combination is not defined by the model.
struct UnsupportedCombination : Error {
    using Error::Error;
};

struct CorruptCheckpoint : Error {
    using Error::Error;
};

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw ContractError(msg);
}

}  // namespace ptran
