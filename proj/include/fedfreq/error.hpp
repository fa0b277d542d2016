// Exception types shared across the library. Each maps to one failure
// contract (shape mismatch, bad label, malformed file, ...) so callers and
// tests can discriminate by type.
#pragma once

#include <stdexcept>
#include <string>

namespace fedfreq {

struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

struct DimensionError : Error {
    using Error::Error;
};

struct DegenerateBatchError : Error {
    using Error::Error;
};

struct LabelError : Error {
    using Error::Error;
};

struct UnsupportedRatioError : Error {
    using Error::Error;
};

struct FrequencyMismatchError : Error {
    using Error::Error;
};

struct ParseError : Error {
    using Error::Error;
};

struct IngestionError : Error {
    using Error::Error;
};

struct ConfigurationError : Error {
    using Error::Error;
};

struct AggregationError : Error {
    using Error::Error;
};

struct IoError : Error {
    using Error::Error;
};

}  // namespace fedfreq
