#pragma once

#include <stdexcept>
#include <string>

namespace stepviz {

// Error taxonomy used across the library. Each maps to one failure class a
// caller can reasonably branch on; everything derives from std::runtime_error
// so a generic catch still works.

struct DimError : std::runtime_error {
    explicit DimError(const std::string& msg) : std::runtime_error("dimension error: " + msg) {}
};

struct IndexError : std::runtime_error {
    explicit IndexError(const std::string& msg) : std::runtime_error("index error: " + msg) {}
};

struct ContractError : std::runtime_error {
    explicit ContractError(const std::string& msg) : std::runtime_error("contract error: " + msg) {}
};

struct EmptyInputError : std::runtime_error {
    explicit EmptyInputError(const std::string& msg) : std::runtime_error("empty input: " + msg) {}
};

struct InsufficientDataError : std::runtime_error {
    explicit InsufficientDataError(const std::string& msg)
        : std::runtime_error("insufficient data: " + msg) {}
};

struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error("io error: " + msg) {}
};

struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error("config error: " + msg) {}
};

// Raised when training hits repeated non-finite gradients; the CLI maps this
// to exit code 4.
struct NumericalAbort : std::runtime_error {
    explicit NumericalAbort(const std::string& msg)
        : std::runtime_error("numerical abort: " + msg) {}
};

}  // namespace stepviz
