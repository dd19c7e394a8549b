#pragma once

#include <stdexcept>
#include <string>

namespace cosod {

/// Bad user input: malformed config, invalid parameter, broken dataset layout.
/// The CLI maps these to exit code 2.
class ValidationError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Tensor/image dimensions do not match what an operation requires.
class ShapeError : public ValidationError {
public:
    using ValidationError::ValidationError;
};

class ConfigError : public ValidationError {
public:
    using ValidationError::ValidationError;
};

/// A backend operation needs external weights that are not loaded.
class BackendUnavailable : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// The backend exists but does not implement the requested capability.
class FeatureUnavailable : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Optimization produced a non-finite value; carries diagnostics in the message.
class NumericalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

} // namespace cosod
