#pragma once

#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace flexdepth {

/// Shape or dimension disagreement between operands.
struct DimensionError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Invalid configuration value or out-of-range layer selection.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Non-finite values where finite ones are required.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Token id outside the vocabulary, or an empty reduction domain.
struct IndexError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Misuse of the computation graph (e.g. a second backward pass).
struct GraphError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Checkpoints that cannot be combined.
struct IncompatibilityError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline std::string shape_string(const std::vector<std::size_t>& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << 'x';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

}  // namespace flexdepth
