#pragma once

#include <stdexcept>
#include <string>

namespace zsq {

// Non-finite loss or gradient state; CLI maps this to exit code 3.
struct DivergenceError : std::runtime_error {
    explicit DivergenceError(const std::string& what) : std::runtime_error(what) {}
};

// Bad configuration or file format; CLI maps this to exit code 2.
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace zsq
