// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace lqat {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Shape disagreement between operands; the message carries both shapes.
class DimensionError : public Error {
public:
    using Error::Error;
};

// NaN/Inf produced or consumed where finite values are required.
class NumericError : public Error {
public:
    using Error::Error;
};

// Caller violated an API precondition.
class ContractError : public Error {
public:
    using Error::Error;
};

// Bad configuration value, scheme string or unknown key.
class ConfigError : public Error {
public:
    using Error::Error;
};

// Bad input data (token id out of range, empty corpus, ...).
class InputError : public Error {
public:
    using Error::Error;
};

class CapacityError : public Error {
public:
    using Error::Error;
};

class CheckpointError : public Error {
public:
    using Error::Error;
};

class FileError : public Error {
public:
    using Error::Error;
};

}  // namespace lqat
