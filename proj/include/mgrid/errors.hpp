#pragma once

#include <stdexcept>
#include <string>

namespace mgrid {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed input text (JSON syntax or a missing/ill-typed field).
class ParseError : public Error {
public:
    ParseError(const std::string& where, const std::string& what)
        : Error("parse error at " + where + ": " + what), where_(where) {}

    const std::string& where() const noexcept { return where_; }

private:
    std::string where_;
};

/// Well-formed input that violates a data-model invariant.
class ValidationError : public Error {
public:
    using Error::Error;
};

/// A numerical procedure failed (Newton divergence, singular matrix, ...).
class NumericalError : public Error {
public:
    NumericalError(const std::string& what, double residual = 0.0, double condition = 0.0)
        : Error(what), residual_(residual), condition_(condition) {}

    double residual() const noexcept { return residual_; }
    double condition() const noexcept { return condition_; }

private:
    double residual_;
    double condition_;
};

/// A stability certificate was rejected (bad fields or digest mismatch).
class CertificateError : public Error {
public:
    using Error::Error;
};

}  // namespace mgrid
