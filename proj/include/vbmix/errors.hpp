#pragma once

#include <stdexcept>
#include <string>

namespace vbmix {

/// Bad inputs: malformed files, inconsistent shapes, violated preconditions.
class ValidationError : public std::runtime_error {
public:
  explicit ValidationError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Numerical failure: singular systems, failed SPD repair, non-finite results.
class NumericalError : public std::runtime_error {
public:
  explicit NumericalError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace vbmix
