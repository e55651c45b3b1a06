#pragma once

#include <stdexcept>
#include <string>

namespace conetest {

// Input problems (bad files, bad configuration, non-nested models) derive
// from InputError; numerical breakdowns derive from NumericalError. The CLI
// maps the two families onto distinct exit codes.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class InputError : public Error {
public:
    using Error::Error;
};

class NumericalError : public Error {
public:
    using Error::Error;
};

class ConfigError : public InputError {
public:
    using InputError::InputError;
};

class ParseError : public InputError {
public:
    ParseError(const std::string& what, long row = -1)
        : InputError(what), row_(row) {}
    long row() const noexcept { return row_; }

private:
    long row_;
};

class ValidationError : public InputError {
public:
    using InputError::InputError;
};

class NestednessError : public InputError {
public:
    using InputError::InputError;
};

class SchemaError : public InputError {
public:
    using InputError::InputError;
};

class FimInputError : public InputError {
public:
    using InputError::InputError;
};

class EvaluationError : public NumericalError {
public:
    EvaluationError(const std::string& what, std::string individual = {})
        : NumericalError(what), individual_(std::move(individual)) {}
    const std::string& individual() const noexcept { return individual_; }

private:
    std::string individual_;
};

class MetricError : public NumericalError {
public:
    using NumericalError::NumericalError;
};

class ProjectionError : public NumericalError {
public:
    using NumericalError::NumericalError;
};

class EstimationError : public NumericalError {
public:
    using NumericalError::NumericalError;
};

/// A fitted likelihood that is inconsistent with nesting (e.g. a clearly
/// negative likelihood ratio), which signals an optimizer failure.
class FitError : public NumericalError {
public:
    using NumericalError::NumericalError;
};

class BootstrapError : public NumericalError {
public:
    BootstrapError(const std::string& what, int failures)
        : NumericalError(what), failures_(failures) {}
    int failures() const noexcept { return failures_; }

private:
    int failures_;
};

}  // namespace conetest
