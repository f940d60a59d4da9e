#pragma once

#include <stdexcept>
#include <string>

namespace deconf {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed input: bad probabilities, unknown names, unreadable files.
class DataError : public Error {
public:
    using Error::Error;
};

/// Conditioning on an event of probability zero.
class ZeroProbabilityError : public Error {
public:
    using Error::Error;
};

/// A causal graph does not satisfy the structure an estimator requires.
class StructuralError : public Error {
public:
    using Error::Error;
};

/// An adjustment set that does not satisfy the backdoor criterion.
class InvalidAdjustmentError : public StructuralError {
public:
    using StructuralError::StructuralError;
};

/// Tensor shapes incompatible with an operation.
class ShapeError : public Error {
public:
    using Error::Error;
};

}  // namespace deconf
