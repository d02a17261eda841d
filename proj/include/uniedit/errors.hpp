#pragma once

#include <stdexcept>
#include <string>

namespace uniedit {

// Base class for all errors raised by the engine.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Tensor rank/axis mismatch. Messages name the offending axes.
class ShapeError : public Error {
public:
    explicit ShapeError(const std::string& msg) : Error(msg) {}
};

// An additive attention mask left a query row with no visible key.
class DegenerateMaskError : public Error {
public:
    explicit DegenerateMaskError(const std::string& msg) : Error(msg) {}
};

// A hook returned tensors that violate the site contract. Messages name
// branch/step/layer/kind.
class HookContractError : public Error {
public:
    explicit HookContractError(const std::string& msg) : Error(msg) {}
};

// Run configuration failed validation before any compute started.
class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& msg) : Error(msg) {}
};

// File parsing / persistence failures.
class IoError : public Error {
public:
    explicit IoError(const std::string& msg) : Error(msg) {}
};

}  // namespace uniedit
