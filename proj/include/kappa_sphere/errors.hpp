#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace kappa_sphere {

/// Invalid argument value: negative/non-finite concentration, dimension mismatch, bad shape.
class DomainError : public std::domain_error {
public:
    using std::domain_error::domain_error;
};

/// Input lies outside the validated range of an oracle.
class RangeError : public std::out_of_range {
public:
    using std::out_of_range::out_of_range;
};

/// Unknown class label or id.
class LookupError : public std::out_of_range {
public:
    using std::out_of_range::out_of_range;
};

/// A resultant/centroid/concentration estimate has collapsed (zero-length sum, R = 1, ...).
class DegenerateError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// The requested method cannot run on the given data (e.g. pose-based score without poses).
class UnsupportedError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed file. `location` is a byte offset for binary files or a JSON path for documents.
class FormatError : public std::runtime_error {
public:
    FormatError(const std::string& what, std::string location)
        : std::runtime_error(what + " (at " + location + ")"), location_(std::move(location)) {}

    const std::string& location() const noexcept { return location_; }

private:
    std::string location_;
};

}  // namespace kappa_sphere
