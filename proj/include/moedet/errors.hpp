#pragma once

#include <stdexcept>
#include <string>

namespace moedet {

// Malformed input data: unreadable files, bad magic, shape/payload mismatches.
// The CLI maps this to exit code 2.
struct FormatError : std::runtime_error {
  explicit FormatError(const std::string& msg) : std::runtime_error(msg) {}
};

// Inconsistent configuration: unknown expert ids, bad parameter combinations.
// The CLI maps this to exit code 3.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace moedet
