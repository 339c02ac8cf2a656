// Copyright (c) 2026 PatchPool Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace patchpool {

// Base class for all library errors.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Mismatched tensor shapes or axes.
struct DimensionError : Error {
    using Error::Error;
};

// Invalid configuration value (bad field, bad key, out of range).
struct ConfigError : Error {
    using Error::Error;
};

// Input resolution unusable by the model (not divisible by the patch stride).
struct ResolutionError : Error {
    using Error::Error;
};

// Broken API contract (non-scalar loss, step out of range, shape drift).
struct ContractError : Error {
    using Error::Error;
};

// Malformed input file.
struct ParseError : Error {
    using Error::Error;
};

// Bad dataset contents (empty class directory, out-of-range label).
struct DataError : Error {
    using Error::Error;
};

// Batch statistics unavailable (train-mode batch norm on a single element).
struct StatisticsError : Error {
    using Error::Error;
};

// Training loss went NaN or exploded.
struct DivergenceError : Error {
    using Error::Error;
};

// Operation requires a different model mode (e.g. per-class tokens).
struct ModeError : Error {
    using Error::Error;
};

}  // namespace patchpool
