#pragma once

#include <stdexcept>
#include <string>

namespace confloop {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed input data or metadata (CSV rows, covariate values).
class DataError : public Error {
public:
    using Error::Error;
};

/// Invalid or inconsistent configuration.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// A causal tree (or an ensemble of them) could not be fitted.
class FitError : public Error {
public:
    using Error::Error;
};

/// Restriction requested on a covariate kind that cannot be stratified.
class RestrictionError : public Error {
public:
    using Error::Error;
};

/// A backend response failed validation after all retries.
class SchemaError : public Error {
public:
    using Error::Error;
};

/// Transport-level failure talking to a remote backend.
class BackendError : public Error {
public:
    using Error::Error;
};

class NotFoundError : public Error {
public:
    using Error::Error;
};

class ConflictError : public Error {
public:
    using Error::Error;
};

class TimeoutError : public Error {
public:
    using Error::Error;
};

}  // namespace confloop
