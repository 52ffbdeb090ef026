#pragma once

#include <stdexcept>
#include <string>

namespace crdcgan {

// Error taxonomy mirrors the CLI exit codes: usage/config problems exit 2,
// missing or inconsistent artifacts exit 3, numerical failures exit 4.

struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ArtifactError : std::runtime_error {
  explicit ArtifactError(const std::string& msg) : std::runtime_error(msg) {}
};

struct NumericalError : std::runtime_error {
  explicit NumericalError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace crdcgan
