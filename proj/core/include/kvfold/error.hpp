#pragma once

#include <stdexcept>
#include <string>

namespace kvfold {

// Base class for every error raised by the engine.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Tensor shapes or lengths that do not agree.
class ShapeError : public Error {
public:
    using Error::Error;
};

// A kernel produced NaN or Inf.
class NumericError : public Error {
public:
    using Error::Error;
};

// Absolute position overflow, collision or regression.
class PositionError : public Error {
public:
    using Error::Error;
};

// Malformed or unreadable binary file (weights or fold state).
class FormatError : public Error {
public:
    using Error::Error;
};

// Invalid user-facing configuration (policy parameters, run settings).
class ConfigError : public Error {
public:
    using Error::Error;
};

}  // namespace kvfold
