#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace densflow {

// Batches are stored one sample per column: a (dim x n) matrix holds n
// vectors of dimension dim. Single vectors are column vectors.
template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using Matrix = MatrixX<double>;
using Vector = VectorX<double>;
using MatrixF = MatrixX<float>;
using VectorF = VectorX<float>;

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ShapeError : Error {
  using Error::Error;
};
struct DomainError : Error {
  using Error::Error;
};
struct ConfigError : Error {
  using Error::Error;
};
struct SingularTimeError : DomainError {
  using DomainError::DomainError;
};
struct IntegrationError : Error {
  using Error::Error;
};
struct CompatibilityError : Error {
  using Error::Error;
};

inline void require_same_shape(Eigen::Index rows_a, Eigen::Index cols_a, Eigen::Index rows_b,
                               Eigen::Index cols_b, const char* what) {
  if (rows_a != rows_b || cols_a != cols_b) {
    throw ShapeError(std::string(what) + ": shape mismatch (" + std::to_string(rows_a) + "x" +
                     std::to_string(cols_a) + " vs " + std::to_string(rows_b) + "x" +
                     std::to_string(cols_b) + ")");
  }
}

constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Seeded random stream. Child streams obtained through split() depend only
/// on (seed, index), so per-sample work is independent of batch order.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : seed_(seed), engine_(splitmix64(seed)) {}

  std::uint64_t seed() const { return seed_; }

  Rng split(std::uint64_t index) const { return Rng(splitmix64(seed_ ^ splitmix64(index + 1))); }

  // Child stream drawn from this stream's state; advances this stream.
  Rng fork() { return Rng(engine_()); }

  std::uint64_t next_u64() { return engine_(); }

  double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double normal() { return normal_(engine_); }
  double rademacher() { return (engine_() >> 63) ? 1.0 : -1.0; }
  std::size_t index(std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine_); }

  Matrix normal(Eigen::Index rows, Eigen::Index cols) {
    Matrix out(rows, cols);
    for (Eigen::Index j = 0; j < cols; ++j)
      for (Eigen::Index i = 0; i < rows; ++i) out(i, j) = normal();
    return out;
  }

  Matrix uniform(Eigen::Index rows, Eigen::Index cols) {
    Matrix out(rows, cols);
    for (Eigen::Index j = 0; j < cols; ++j)
      for (Eigen::Index i = 0; i < rows; ++i) out(i, j) = uniform();
    return out;
  }

  std::mt19937_64& engine() { return engine_; }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

}  // namespace densflow
