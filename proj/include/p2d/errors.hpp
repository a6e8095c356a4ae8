#pragma once

#include <stdexcept>
#include <string>

namespace p2d {

// Error taxonomy shared by all modules. Every throw site includes the
// offending values in the message so failures are actionable from logs.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Tensor/matrix dimension mismatches.
struct ShapeError : Error {
    using Error::Error;
};

// Invalid argument values (rates, ratios, temperatures, empty inputs).
struct ParamError : Error {
    using Error::Error;
};

// Out-of-range ids (heads, tokens, sample ids).
struct IndexError : Error {
    using Error::Error;
};

// Two artifacts that must share a config do not (model vs mask, etc).
struct IncompatError : Error {
    using Error::Error;
};

// Selection ledger finalized with uncovered samples.
struct CoverageError : Error {
    using Error::Error;
};

// Non-finite loss or other numeric breakdown; message carries the step.
struct NumericError : Error {
    using Error::Error;
};

struct IoError : Error {
    using Error::Error;
};

}  // namespace p2d
