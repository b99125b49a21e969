#pragma once

#include <stdexcept>
#include <string>

namespace lseg {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
public:
    using Error::Error;
};

// Non-finite values in a loss, gradient or checked function.
class NumericError : public Error {
public:
    using Error::Error;
};

// Malformed or unsupported files and datasets.
class DataError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

// A checkpoint or config that does not fit the model it is applied to.
class SpecMismatchError : public Error {
public:
    using Error::Error;
};

}  // namespace lseg
