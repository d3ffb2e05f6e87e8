#pragma once

// Exception taxonomy shared by every fedseg component.

#include <stdexcept>
#include <string>

namespace fedseg {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Shape or rank mismatch between tensors.
struct DimensionError : Error {
    using Error::Error;
};

// Value outside its mathematical domain (e.g. BCE target not in [0,1]).
struct DomainError : Error {
    using Error::Error;
};

// Invalid or inconsistent configuration, rejected before any work starts.
struct ConfigError : Error {
    using Error::Error;
};

// Empty or malformed dataset input.
struct DataError : Error {
    using Error::Error;
};

// Optimizer/trainer state inconsistent with the parameter set.
struct StateError : Error {
    using Error::Error;
};

// Federated protocol violation (mismatched updates, zero total weight).
struct ProtocolError : Error {
    using Error::Error;
};

// A federated round aborted; no partial aggregation happened.
struct RoundError : Error {
    using Error::Error;
};

// Too few observations for a statistic.
struct StatError : Error {
    using Error::Error;
};

// Filesystem-level failure; message carries the offending path.
struct IoError : Error {
    using Error::Error;
};

// NaN/Inf detected by the debug-mode finite checks.
struct NumericError : Error {
    using Error::Error;
};

// Binary container errors, one subtype per failure class so callers can
// distinguish corruption from truncation from version skew.
struct FormatError : Error {
    using Error::Error;
};
struct BadMagicError : FormatError {
    using FormatError::FormatError;
};
struct BadVersionError : FormatError {
    using FormatError::FormatError;
};
struct CrcError : FormatError {
    using FormatError::FormatError;
};
struct TruncationError : FormatError {
    using FormatError::FormatError;
};

} // namespace fedseg
