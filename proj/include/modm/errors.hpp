#pragma once

#include <stdexcept>
#include <string>

namespace modm {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Argument outside the mathematical domain of an operation.
class DomainError : public Error {
public:
    using Error::Error;
};

/// An object violates one of its structural invariants.
class ValidationError : public Error {
public:
    using Error::Error;
};

/// File or stream failure.
class IoError : public Error {
public:
    using Error::Error;
};

/// Inversion too ill-conditioned to be meaningful.
class IllPosedError : public Error {
public:
    using Error::Error;
};

}  // namespace modm
