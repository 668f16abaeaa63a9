#pragma once

#include <array>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>

namespace dtnet {

using Index = std::int64_t;

// Thrown when tensor extents do not line up.
class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad hyperparameter or option value.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// API misuse (e.g. backward on a non-scalar).
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Broken internal invariant.
class InternalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed input data (datasets, annotations).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Unreadable or corrupt checkpoint.
class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Filesystem failures.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Extents of a dense (N, C, H, W) tensor.
struct Shape4 {
  Index n = 0;
  Index c = 0;
  Index h = 0;
  Index w = 0;

  constexpr Index numel() const { return n * c * h * w; }
  constexpr bool operator==(const Shape4&) const = default;

  std::string str() const {
    std::ostringstream os;
    os << "(" << n << "," << c << "," << h << "," << w << ")";
    return os.str();
  }
};

inline void check_shape(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

enum class Mode { kTrain, kInfer };

enum class Act { kSilu, kRelu, kSigmoid };

}  // namespace dtnet
