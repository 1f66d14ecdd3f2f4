#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace fmg {

// Base class for every error raised by the toolkit.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& message) : std::runtime_error(message) {}
};

// Malformed input text (edge files, DSL, configs). Carries a 1-based line
// or a 0-based character position when one is known.
class ParseError : public Error {
public:
    ParseError(const std::string& message, std::size_t line = 0, std::size_t position = 0)
        : Error(message), line_(line), position_(position) {}

    std::size_t line() const { return line_; }
    std::size_t position() const { return position_; }

private:
    std::size_t line_;
    std::size_t position_;
};

// Well-formed input that violates a data invariant (negative weight,
// rating out of range, malformed metagraph structure).
class ValidationError : public Error {
public:
    using Error::Error;
};

// Bad caller-supplied argument or configuration value.
class ArgumentError : public Error {
public:
    using Error::Error;
};

// Metagraph could not be compiled against a schema.
class CompileError : public Error {
public:
    using Error::Error;
};

// A configured resource budget (enumeration guard, nonzero budget) was hit.
class ResourceError : public Error {
public:
    using Error::Error;
};

// An optimizer produced a non-finite objective.
class DivergenceError : public Error {
public:
    using Error::Error;
};

// Solver finished but the result is unusable (e.g. every singular value
// thresholded away). The message includes advice.
class ConvergenceError : public Error {
public:
    using Error::Error;
};

}  // namespace fmg
