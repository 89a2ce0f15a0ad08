#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

namespace prosona {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bad argument values: wrong shapes, out-of-range reals, non-finite input.
class ValidationError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// A file exists and was read, but its content does not match the expected layout.
class FormatError : public Error {
 public:
  using Error::Error;
};

class LookupError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Operation not allowed in the current object state (e.g. a stage-1-only model asked to personalize).
class StateError : public Error {
 public:
  using Error::Error;
};

class DegenerateGeometryError : public Error {
 public:
  using Error::Error;
};

class TrainingDivergedError : public Error {
 public:
  using Error::Error;
};

/// Row-major 2-D grid. Used for images, probability maps and binary masks.
template <class T>
struct Grid2D {
  int height = 0;
  int width = 0;
  std::vector<T> values;

  Grid2D() = default;
  Grid2D(int h, int w, T fill = T{}) : height(h), width(w), values(static_cast<std::size_t>(h) * w, fill) {}

  [[nodiscard]] std::size_t size() const { return values.size(); }
  T& at(int y, int x) { return values[static_cast<std::size_t>(y) * width + x]; }
  const T& at(int y, int x) const { return values[static_cast<std::size_t>(y) * width + x]; }
  [[nodiscard]] bool same_shape(int h, int w) const { return height == h && width == w; }
  template <class U>
  [[nodiscard]] bool same_shape(const Grid2D<U>& other) const {
    return height == other.height && width == other.width;
  }
  bool operator==(const Grid2D&) const = default;
};

using Image = Grid2D<double>;
using ProbabilityMap = Grid2D<double>;
using Mask = Grid2D<std::uint8_t>;

[[nodiscard]] std::size_t mask_area(const Mask& m);
[[nodiscard]] Mask binarize(const ProbabilityMap& p, double threshold = 0.5);
/// Throws ValidationError when any value is not 0 or 1.
void require_binary(const Mask& m, const char* what);

/// splitmix64 finaliser; used to derive independent child seeds.
[[nodiscard]] std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream);
[[nodiscard]] std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b);

/// Runs body(i) for i in [0, n) on up to `threads` workers. Results must be written
/// to per-index slots; reductions happen afterwards in index order.
void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& body);

[[nodiscard]] int default_thread_count();

/// Keeps large tensor buffers on the heap instead of mmap/munmap per allocation (glibc only;
/// a no-op elsewhere). Call once at program start.
void tune_allocator();

}  // namespace prosona
