#pragma once

#include <stdexcept>
#include <string>

namespace solens {

// Base for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Inputs that violate a documented contract (shapes, ranges, config keys).
class ValidationError : public Error {
public:
    using Error::Error;
};

// Filesystem and container failures.
class IoError : public Error {
public:
    using Error::Error;
};

// Non-finite values encountered during a forward pass.
class NumericalError : public Error {
public:
    NumericalError(const std::string& what, int layer) : Error(what), layer_(layer) {}
    int layer() const noexcept { return layer_; }

private:
    int layer_;
};

}  // namespace solens
