#pragma once

#include <stdexcept>
#include <string>

namespace revblind {

/// Base class for all library errors.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Invalid argument or violated precondition (bad shapes, empty input, ...).
class ValueError : public Error {
public:
    explicit ValueError(const std::string& msg) : Error(msg) {}
};

/// Malformed or inconsistent configuration. CLI exit code 2.
class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& msg) : Error(msg) {}
};

/// A required upstream artifact (dataset, checkpoint) is missing. CLI exit code 3.
class MissingDependencyError : public Error {
public:
    explicit MissingDependencyError(const std::string& msg) : Error(msg) {}
};

/// Non-finite value detected where finite math is required. CLI exit code 4.
class NumericalError : public Error {
public:
    explicit NumericalError(const std::string& msg) : Error(msg) {}
};

/// File format or I/O failure.
class IoError : public Error {
public:
    explicit IoError(const std::string& msg) : Error(msg) {}
};

} // namespace revblind
