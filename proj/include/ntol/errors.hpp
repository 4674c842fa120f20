// Error types shared across the library. The CLI maps these onto distinct
// exit codes, so keep the hierarchy flat and specific.

#pragma once

#include <stdexcept>
#include <string>

namespace ntol {

// Bad value fed to an operation (out-of-range cosine, zero-norm feature, ...).
struct InvalidInputError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Operation queried before its inputs are meaningful (histogram below warmup).
struct NotReadyError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Noise-rate estimation impossible: no usable peak in the distribution.
struct EstimationUnavailableError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Malformed configuration (unknown key, invariant violation).
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Malformed data file; carries the 1-based line number when known.
struct ParseError : std::runtime_error {
    ParseError(const std::string& msg, long line = -1)
        : std::runtime_error(line >= 0 ? msg + " (line " + std::to_string(line) + ")" : msg),
          line_number(line) {}
    long line_number;
};

// Training produced a non-finite loss or logits.
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

} // namespace ntol
