#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace gazekit {

template <class S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using Vec = Eigen::Matrix<S, Eigen::Dynamic, 1>;

using Index = Eigen::Index;

// ---------------------------------------------------------------------------
// Errors. The CLI maps UsageError/ConfigError/ValidationError/ParseError to
// exit code 2, everything else to 1.
// ---------------------------------------------------------------------------

class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& msg)
      : std::runtime_error(msg), kind_(std::move(kind)) {}
  const std::string& kind() const { return kind_; }

 private:
  std::string kind_;
};

struct ShapeError : Error {
  explicit ShapeError(const std::string& m) : Error("shape", m) {}
};
struct ConfigError : Error {
  explicit ConfigError(const std::string& m) : Error("config", m) {}
};
struct ValidationError : Error {
  explicit ValidationError(const std::string& m) : Error("validation", m) {}
};
struct ParseError : Error {
  explicit ParseError(const std::string& m) : Error("parse", m) {}
};
struct IoError : Error {
  explicit IoError(const std::string& m) : Error("io", m) {}
};
struct UsageError : Error {
  explicit UsageError(const std::string& m) : Error("usage", m) {}
};
struct NumericError : Error {
  explicit NumericError(const std::string& m) : Error("numeric", m) {}
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw ValidationError(msg);
}

// ---------------------------------------------------------------------------
// Deterministic RNG. Every stochastic stream in the library is derived from a
// base seed through derive_seed, so resuming a run at step k re-creates the
// exact stream without serializing engine internals.
// ---------------------------------------------------------------------------

inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t tag,
                                 std::uint64_t a = 0, std::uint64_t b = 0) {
  std::uint64_t s = mix64(base ^ mix64(tag));
  s = mix64(s ^ mix64(a));
  return mix64(s ^ mix64(b));
}

// splitmix64 core; identical output on every platform.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : state_(seed) {}

  std::uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ull;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // uniform in [0,1)
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // index in [0, n)
  std::uint64_t below(std::uint64_t n) { return next_u64() % n; }

  double normal() {
    // polar Box-Muller, spare discarded to keep the stream position simple
    double u, v, s;
    do {
      u = 2.0 * uniform() - 1.0;
      v = 2.0 * uniform() - 1.0;
      s = u * u + v * v;
    } while (s >= 1.0 || s == 0.0);
    return u * std::sqrt(-2.0 * std::log(s) / s);
  }

  // normal(0, stddev) clipped to +-2 stddev by rejection
  double trunc_normal(double stddev) {
    double x;
    do {
      x = normal();
    } while (std::abs(x) > 2.0);
    return x * stddev;
  }

  template <class Derived>
  void fill_normal(Eigen::MatrixBase<Derived>& m, double stddev) {
    using Sc = typename Derived::Scalar;
    for (Index i = 0; i < m.rows(); ++i)
      for (Index j = 0; j < m.cols(); ++j)
        m(i, j) = static_cast<Sc>(normal() * stddev);
  }

  template <class Derived>
  void fill_trunc_normal(Eigen::MatrixBase<Derived>& m, double stddev) {
    using Sc = typename Derived::Scalar;
    for (Index i = 0; i < m.rows(); ++i)
      for (Index j = 0; j < m.cols(); ++j)
        m(i, j) = static_cast<Sc>(trunc_normal(stddev));
  }

  template <class Derived>
  void fill_uniform(Eigen::MatrixBase<Derived>& m, double lo, double hi) {
    using Sc = typename Derived::Scalar;
    for (Index i = 0; i < m.rows(); ++i)
      for (Index j = 0; j < m.cols(); ++j)
        m(i, j) = static_cast<Sc>(uniform(lo, hi));
  }

 private:
  std::uint64_t state_;
};

template <class S>
bool all_finite(const Mat<S>& m) {
  return m.allFinite();
}

}  // namespace gazekit
