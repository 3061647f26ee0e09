#pragma once

#include <stdexcept>
#include <string>

namespace transop {

// Base for everything thrown by this library. The CLI maps any Error to a
// one-line "error: ..." message and a nonzero exit code.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Incompatible tensor/volume shapes.
struct DimensionError : Error {
    using Error::Error;
};

// Invalid or inconsistent configuration (bad hyperparameter, checkpoint
// mismatch, unknown mode, ...).
struct ConfigError : Error {
    using Error::Error;
};

// Violated call contract (non-scalar loss, empty input, step out of range).
struct ContractError : Error {
    using Error::Error;
};

// Bad data content (label out of range, malformed CSV cell).
struct DataError : Error {
    using Error::Error;
};

// Malformed binary file; message carries the byte offset.
struct FormatError : Error {
    using Error::Error;
};

// Input degenerate for the requested operation (e.g. empty skull-strip mask).
struct DegenerateInputError : Error {
    using Error::Error;
};

// Spatial input smaller than the requested patch/kernel geometry.
struct InputTooSmallError : Error {
    using Error::Error;
};

// A class stratum would be empty in some split.
struct StratificationError : Error {
    using Error::Error;
};

// Metric undefined on the given sample (e.g. AUC with one class).
struct UndefinedMetricError : Error {
    using Error::Error;
};

// Training aborted (NaN loss); message carries epoch, batch and lr.
struct TrainAbortError : Error {
    using Error::Error;
};

// Filesystem-level failure.
struct IoError : Error {
    using Error::Error;
};

} // namespace transop
