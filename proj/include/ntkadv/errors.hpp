#pragma once

#include <stdexcept>
#include <string>

namespace ntkadv {

/// Invalid argument values (sizes, ranges, mismatched shapes).
class ParameterError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Malformed input files.
class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Inputs outside a function's mathematical domain (e.g. zero-norm vectors).
class DomainError : public std::domain_error {
public:
    using std::domain_error::domain_error;
};

/// Numerical failures: eigensolver non-convergence, singular systems, undefined metrics.
class NumericalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Training loss became non-finite or exploded.
class DivergenceError : public NumericalError {
public:
    DivergenceError(const std::string& what, int epoch) : NumericalError(what), epoch_(epoch) {}
    [[nodiscard]] int epoch() const noexcept { return epoch_; }

private:
    int epoch_;
};

/// Experiment configuration problems; `field` is a JSON-pointer-like path.
class ConfigError : public std::runtime_error {
public:
    ConfigError(const std::string& field, const std::string& message)
        : std::runtime_error(field + ": " + message), field_(field) {}
    [[nodiscard]] const std::string& field() const noexcept { return field_; }

private:
    std::string field_;
};

}  // namespace ntkadv
