#pragma once

#include <stdexcept>
#include <string>

namespace unims {

// Error taxonomy. The CLI maps NumericError to exit code 2 and every other
// category to exit code 1.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ShapeError : Error {
    using Error::Error;
};

struct InputError : Error {
    using Error::Error;
};

struct NumericError : Error {
    using Error::Error;
};

struct LookupError : Error {
    using Error::Error;
};

struct FormatError : Error {
    using Error::Error;
};

struct ConfigError : Error {
    using Error::Error;
};

struct IntegrityError : Error {
    using Error::Error;
};

}  // namespace unims
