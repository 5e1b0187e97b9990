#pragma once

#include <stdexcept>
#include <string>

namespace raunet {

// Base class for all library errors.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Tensor shape disagreements (matmul inner dims, add operands, ...).
class ShapeError : public Error {
public:
    using Error::Error;
};

// Spatial geometry problems: invalid conv output sizes, indivisible
// pooling extents, model stage mismatches.
class GeometryError : public Error {
public:
    using Error::Error;
};

// Bad configuration values (chunk divisibility, bucket counts, variants).
class ConfigError : public Error {
public:
    using Error::Error;
};

// Dataset and file problems: unreadable files, bad labels, bad manifests.
class DataError : public Error {
public:
    using Error::Error;
};

// Checkpoint file cannot be parsed (bad magic, truncation mid-record).
class CorruptFileError : public DataError {
public:
    using DataError::DataError;
};

// Checkpoint format version not understood.
class VersionMismatchError : public DataError {
public:
    using DataError::DataError;
};

// Non-finite loss or other numeric failure during training.
class NumericError : public Error {
public:
    using Error::Error;
};

// Command-line / config-file usage problems.
class UsageError : public Error {
public:
    using Error::Error;
};

}  // namespace raunet
