#pragma once

#include <stdexcept>
#include <string>

namespace dcis {

// Base class for everything the library throws. The CLI maps subclasses to
// exit codes: ConfigError -> 2, DivergenceError -> 3, SearchError -> 4,
// EvalError -> 5 (see tools/dcis_main.cpp).
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Invalid configuration, bad flag values, malformed config files.
struct ConfigError : Error {
    using Error::Error;
};

// File IO: missing files, corrupt checkpoints, version mismatches.
struct IoError : Error {
    using Error::Error;
};

// Training produced a non-finite loss.
struct DivergenceError : Error {
    DivergenceError(const std::string& msg, long at_step) : Error(msg), step(at_step) {}
    long step = -1;
};

// Evaluation preconditions violated (short samples, missing markers, ...).
struct EvalError : Error {
    using Error::Error;
};

} // namespace dcis
