#pragma once

#include <stdexcept>
#include <string>

namespace brainstr {

// Invalid user-facing configuration (bad keys, out-of-range values).
class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// Shape disagreement between operands.
class DimensionError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// A file on disk violates its documented schema.
class SchemaError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Optimization produced a non-finite loss or similar.
class TrainingError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// A metric is undefined for the given inputs (e.g. AUC with one class).
class MetricError : public std::domain_error {
public:
    using std::domain_error::domain_error;
};

// Broken internal invariant (should be unreachable for valid inputs).
class InternalError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

} // namespace brainstr
