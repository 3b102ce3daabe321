#pragma once

#include <stdexcept>
#include <string>

namespace eotstab {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// A value violates a type invariant (negative weight, unsorted samples, ...).
class InvariantError : public Error {
public:
    using Error::Error;
};

/// Two objects live on incompatible intervals or shapes.
class DomainMismatch : public Error {
public:
    using Error::Error;
};

/// Dense storage limits exceeded (tensor order, linearization size).
class CapacityError : public Error {
public:
    using Error::Error;
};

/// Grid too coarse for the requested finite-difference order.
class GridTooCoarse : public Error {
public:
    using Error::Error;
};

/// Sinkhorn iteration hit max_iter; carries the last residual.
class NonConvergence : public Error {
public:
    NonConvergence(const std::string& what, int iterations, double residual)
        : Error(what), iterations_(iterations), residual_(residual) {}
    int iterations() const noexcept { return iterations_; }
    double residual() const noexcept { return residual_; }

private:
    int iterations_;
    double residual_;
};

/// Explicit flow step requested with a time step above the stability bound.
class CflViolation : public Error {
public:
    CflViolation(const std::string& what, double proposed_dt)
        : Error(what), proposed_dt_(proposed_dt) {}
    double proposed_dt() const noexcept { return proposed_dt_; }

private:
    double proposed_dt_;
};

/// Configuration file rejected; `path` names the offending field.
class ConfigError : public Error {
public:
    ConfigError(const std::string& path, const std::string& what)
        : Error(path + ": " + what), path_(path) {}
    const std::string& path() const noexcept { return path_; }

private:
    std::string path_;
};

}  // namespace eotstab
