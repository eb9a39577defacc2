#pragma once

#include <stdexcept>
#include <string>

namespace msrl {

// Invalid configuration or data that violates a documented invariant.
// Messages name the offending field (and example id where applicable).
class ValidationError : public std::runtime_error {
 public:
  explicit ValidationError(const std::string& msg) : std::runtime_error(msg) {}
};

// File or stream level failure; messages carry path and line number.
class IoError : public std::runtime_error {
 public:
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace msrl
