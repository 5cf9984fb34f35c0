#pragma once

#include <stdexcept>
#include <string>

namespace ivae {

// Shape or argument mismatch detected before any arithmetic happened.
struct ShapeError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Input outside the mathematical domain of an operation (log of a negative, invalid natural parameter...).
struct DomainError : std::domain_error {
    using std::domain_error::domain_error;
};

// NaN/Inf produced during computation, or an optimizer that diverged.
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Bad user configuration (CLI exit code 1).
struct ConfigError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

}  // namespace ivae
