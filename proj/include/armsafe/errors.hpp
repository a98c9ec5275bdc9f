#pragma once

#include <stdexcept>

namespace armsafe {

/// Invalid configuration value or file content.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace armsafe
