#pragma once

#include <stdexcept>
#include <string>

namespace immunodiff {

// Invalid configuration value (non-positive sizes, impossible depth, ...).
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Caller violated an operation's preconditions (shape, width, ordering).
struct ContractError : std::logic_error {
    using std::logic_error::logic_error;
};

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Files exist but disagree with each other (manifest vs. cases, missing tensors).
struct IntegrityError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// A pipeline stage was asked to run before the stage it depends on.
struct DependencyError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Categorical value not present in the encoding statistics.
struct EncodingError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Metric has no defined value for the given input (e.g. no comparable pairs).
struct UndefinedResultError : std::domain_error {
    using std::domain_error::domain_error;
};

inline void require(bool cond, const std::string& what) {
    if (!cond) throw ContractError(what);
}

inline void require_config(bool cond, const std::string& what) {
    if (!cond) throw ConfigError(what);
}

}  // namespace immunodiff
