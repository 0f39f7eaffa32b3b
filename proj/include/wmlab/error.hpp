#pragma once

#include <sstream>
#include <stdexcept>
#include <string>

namespace wmlab {

// Base class for every exception thrown by this library.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Tensor shape or layout mismatch.
class ShapeError : public Error {
public:
    using Error::Error;
};

// Argument outside its documented domain.
class ValueError : public Error {
public:
    using Error::Error;
};

// NaN or Inf escaped a numeric kernel.
class NumericError : public Error {
public:
    using Error::Error;
};

// On-disk format violation (checkpoints, IDX files).
class FormatError : public Error {
public:
    using Error::Error;
};

// Format subcategories; tests and callers can distinguish failure causes.
class BadMagicError : public FormatError {
public:
    using FormatError::FormatError;
};

class VersionError : public FormatError {
public:
    using FormatError::FormatError;
};

class TruncationError : public FormatError {
public:
    using FormatError::FormatError;
};

// Invalid experiment configuration (unknown keys, out-of-range values).
class ConfigError : public Error {
public:
    using Error::Error;
};

// Filesystem problem that is not a format violation.
class IoError : public Error {
public:
    using Error::Error;
};

namespace detail {

inline void cat_into(std::ostringstream&) {}

template <typename T, typename... Rest>
void cat_into(std::ostringstream& os, const T& head, const Rest&... rest) {
    os << head;
    cat_into(os, rest...);
}

// Builds an error message from heterogeneous pieces.
template <typename... Parts>
std::string cat(const Parts&... parts) {
    std::ostringstream os;
    cat_into(os, parts...);
    return os.str();
}

} // namespace detail

} // namespace wmlab
