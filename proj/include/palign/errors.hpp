#pragma once

#include <stdexcept>
#include <string>

namespace palign {

// Exit codes for the CLI: 0 success, 2 usage, 3 data/format, 4 numerical.
enum ExitCode : int {
    kExitOk = 0,
    kExitUsage = 2,
    kExitData = 3,
    kExitNumerical = 4,
};

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Malformed or truncated input files; message carries position context.
struct FormatError : Error {
    using Error::Error;
};

// Semantically invalid data: duplicate keys, unknown labels, missing classes.
struct ValidationError : Error {
    using Error::Error;
};

// Bad configuration or unusable argument combinations.
struct ConfigError : Error {
    using Error::Error;
};

// Degenerate numerics: zero-norm projections, non-finite gradients.
struct NumericalError : Error {
    using Error::Error;
};

inline int exit_code_for(const std::exception& e) {
    if (dynamic_cast<const NumericalError*>(&e)) return kExitNumerical;
    if (dynamic_cast<const ConfigError*>(&e)) return kExitUsage;
    if (dynamic_cast<const FormatError*>(&e)) return kExitData;
    if (dynamic_cast<const ValidationError*>(&e)) return kExitData;
    return kExitData;
}

}  // namespace palign
