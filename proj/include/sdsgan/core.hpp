#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <random>
#include <stdexcept>
#include <string>

namespace sdsgan {

using Eigen::Index;

template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
using MatrixR = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Error taxonomy shared by every module.
struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct CorruptionError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct VersionError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ProtocolError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DivergenceError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline void require(bool condition, const std::string& message) {
  if (!condition) throw ConfigError(message);
}

/// Channel-major stack of image planes: `planes` is channels x (height * width),
/// pixels in row-major order. RGB images are the 3-channel case with values in [0,1].
template <typename Scalar>
struct FeatureMap {
  int height = 0;
  int width = 0;
  MatrixR<Scalar> planes;

  FeatureMap() = default;
  FeatureMap(int channels, int h, int w) : height(h), width(w), planes(MatrixR<Scalar>::Zero(channels, Index(h) * w)) {}

  int channels() const { return static_cast<int>(planes.rows()); }
  Index pixels() const { return Index(height) * width; }
  Scalar& at(int c, int y, int x) { return planes(c, Index(y) * width + x); }
  Scalar at(int c, int y, int x) const { return planes(c, Index(y) * width + x); }
  bool same_shape(const FeatureMap& other) const {
    return height == other.height && width == other.width && channels() == other.channels();
  }

  template <typename Other>
  FeatureMap<Other> cast() const {
    FeatureMap<Other> out;
    out.height = height;
    out.width = width;
    out.planes = planes.template cast<Other>();
    return out;
  }
};

template <typename Scalar>
using Image = FeatureMap<Scalar>;

template <typename Scalar>
void require_same_shape(const FeatureMap<Scalar>& a, const FeatureMap<Scalar>& b, const char* what) {
  if (!a.same_shape(b)) {
    throw ShapeError(std::string(what) + ": shape mismatch (" + std::to_string(a.channels()) + "x" +
                     std::to_string(a.height) + "x" + std::to_string(a.width) + " vs " +
                     std::to_string(b.channels()) + "x" + std::to_string(b.height) + "x" +
                     std::to_string(b.width) + ")");
  }
}

/// Seeded generator with a serializable state. Gaussians come from Box-Muller
/// without caching so the engine state alone determines the continuation.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  double uniform() { return double(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  std::uint64_t next_u64() { return engine_(); }
  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) throw ConfigError("Rng::below: empty range");
    return std::uniform_int_distribution<std::uint64_t>(0, n - 1)(engine_);
  }
  double normal() {
    double u1 = 0.0;
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }
  std::string state() const;
  void set_state(const std::string& s);
  bool operator==(const Rng& other) const { return engine_ == other.engine_; }

 private:
  std::mt19937_64 engine_;
};

template <typename Scalar>
FeatureMap<Scalar> gaussian_like(int channels, int height, int width, Rng& rng) {
  FeatureMap<Scalar> out(channels, height, width);
  for (Index i = 0; i < out.planes.size(); ++i) out.planes.data()[i] = static_cast<Scalar>(rng.normal());
  return out;
}

/// SplitMix64 finalizer; used to derive independent per-entry seeds.
constexpr std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Runs body(i) for i in [0, n). Uses worker threads unless single-threaded mode
/// is on or only one hardware thread exists. `max_workers` > 0 fixes the pool size.
void parallel_for(Index n, const std::function<void(Index)>& body, int max_workers = 0);
void set_single_threaded(bool on);
bool single_threaded();

template <typename Scalar>
Scalar softplus(Scalar x) {
  using std::exp;
  using std::log1p;
  return (x > Scalar(0) ? x : Scalar(0)) + log1p(exp(-(x > Scalar(0) ? x : -x)));
}

template <typename Scalar>
Scalar sigmoid(Scalar x) {
  using std::exp;
  return x >= Scalar(0) ? Scalar(1) / (Scalar(1) + exp(-x)) : exp(x) / (Scalar(1) + exp(x));
}

template <typename Scalar>
Scalar inverse_softplus(Scalar y) {
  using std::exp;
  using std::log;
  // log(exp(y) - 1), stable for large y
  return y > Scalar(20) ? y : log(std::expm1(y));
}

template <typename Scalar>
Scalar logit(Scalar p) {
  using std::log;
  return log(p / (Scalar(1) - p));
}

}  // namespace sdsgan
