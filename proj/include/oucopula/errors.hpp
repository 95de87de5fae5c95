#pragma once

#include <stdexcept>
#include <string>

namespace oucopula {

/// Malformed arguments: bad shapes, invalid configs, out-of-domain inputs.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Bad or truncated files, unreadable paths, schema violations.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Non-finite losses or gradients, degenerate estimates.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A feature outside the supported surface (e.g. non-Gaussian marginals).
class Unsupported : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

}  // namespace oucopula
