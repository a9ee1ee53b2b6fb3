#pragma once

#include <stdexcept>
#include <string>

namespace agln {

// Error taxonomy shared by the library and the CLI.
// The CLI maps ConfigError -> exit 2 and NumericError -> exit 3.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Shape / rank mismatch between tensors. Message names both shapes.
struct DimensionError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Malformed input data (files, masks, manifests).
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// API precondition violated (e.g. backward on a non-scalar loss).
struct ContractError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Non-finite values or other numerical breakdown.
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace agln
