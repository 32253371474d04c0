#pragma once

// Shared aliases, error types and the deterministic RNG used across the
// library. Everything downstream includes this header first.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace dyntomo {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
template <typename T>
using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

inline constexpr double kPi = 3.14159265358979323846;

// Error taxonomy mirrors the CLI exit codes: bad inputs or malformed files
// exit with 2, numerical breakdown mid-run exits with 3.
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <typename Derived>
bool all_finite(const Eigen::MatrixBase<Derived>& m) {
  return m.allFinite();
}

template <typename T>
void require_finite(const Mat<T>& m, const char* what) {
  if (!m.allFinite())
    throw ValidationError(std::string(what) + ": contains non-finite values");
}

// Deterministic RNG. mt19937_64 gives us a portable stream and a
// standard-specified text serialization, which we rely on for bit-exact
// checkpoint/resume. The distributions are hand-rolled because libstdc++'s
// std::normal_distribution caches state and is not portable across
// implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : eng_(seed) {}

  std::uint64_t next_u64() { return eng_(); }

  // Uniform in [0, 1) with 53 random mantissa bits.
  double uniform01() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) {
    return lo + (hi - lo) * uniform01();
  }

  // Box-Muller, cosine branch only. Always consumes exactly two engine
  // draws (modulo the astronomically rare u1 == 0 retry), so interleaved
  // consumers stay reproducible.
  double normal() {
    double u1 = uniform01();
    while (u1 <= 0.0) u1 = uniform01();
    const double u2 = uniform01();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * kPi * u2);
  }

  // Uniform integer in [0, n). Modulo bias is ~n * 2^-64, irrelevant for the
  // small n used here (batch indices, shuffles).
  std::uint64_t uniform_int(std::uint64_t n) {
    if (n == 0) throw ValidationError("Rng::uniform_int: n must be positive");
    return eng_() % n;
  }

  template <typename It>
  void shuffle(It first, It last) {
    const auto n = static_cast<std::uint64_t>(last - first);
    for (std::uint64_t i = n; i > 1; --i)
      std::swap(first[i - 1], first[uniform_int(i)]);
  }

  // Text round trip is bit-exact (the stream format is specified by the
  // standard as the engine's state words in decimal).
  std::string save_state() const {
    std::ostringstream os;
    os << eng_;
    return os.str();
  }

  void load_state(const std::string& s) {
    std::istringstream is(s);
    is >> eng_;
    if (is.fail()) throw IoError("Rng::load_state: malformed state string");
  }

  bool operator==(const Rng& o) const { return eng_ == o.eng_; }

 private:
  std::mt19937_64 eng_;
};

// One time frame of a square density image. pixel_spacing is the physical
// edge length of a pixel; projections use the same spacing for detector bins.
template <typename T>
struct ImageFrame {
  Mat<T> pixels;
  T pixel_spacing = T(1);
};

// A sequence of frames sharing one geometry. `normalization` records the
// peak value metrics should reference; `provenance` is a human-readable
// note about how the frames were made.
template <typename T>
struct DynamicObject {
  std::vector<Mat<T>> frames;
  T pixel_spacing = T(1);
  T normalization = T(1);
  std::string provenance;

  int num_frames() const { return static_cast<int>(frames.size()); }
  int side() const {
    return frames.empty() ? 0 : static_cast<int>(frames.front().rows());
  }
};

template <typename T>
void validate_frame(const Mat<T>& pixels, const char* what) {
  if (pixels.rows() != pixels.cols())
    throw ValidationError(std::string(what) + ": frame must be square, got " +
                          std::to_string(pixels.rows()) + "x" +
                          std::to_string(pixels.cols()));
  if (pixels.rows() < 2)
    throw ValidationError(std::string(what) + ": frame side must be >= 2");
  require_finite(pixels, what);
}

template <typename T>
void validate_object(const DynamicObject<T>& obj, const char* what) {
  if (obj.frames.empty())
    throw ValidationError(std::string(what) + ": object has no frames");
  const auto side = obj.frames.front().rows();
  for (const auto& f : obj.frames) {
    validate_frame(f, what);
    if (f.rows() != side)
      throw ValidationError(std::string(what) +
                            ": frames disagree on side length");
  }
  if (!(obj.pixel_spacing > T(0)))
    throw ValidationError(std::string(what) + ": pixel_spacing must be > 0");
}

}  // namespace dyntomo
