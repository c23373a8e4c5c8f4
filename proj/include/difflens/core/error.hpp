#pragma once

#include <stdexcept>
#include <string>

namespace difflens {

// Invalid parameters, malformed config files, violated preconditions.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// A pipeline artifact that should exist is missing, stale or tampered with.
class DependencyError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// NaN/Inf, divergence, or a numerical target that cannot be met.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed binary or text artifact.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline void require(bool cond, const std::string& what) {
  if (!cond) throw ConfigError(what);
}

}  // namespace difflens
