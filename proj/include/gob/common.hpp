#pragma once

#include <cstdint>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>

#include <boost/random/normal_distribution.hpp>
#include <Eigen/Dense>
#include <Eigen/Sparse>

namespace gob {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using SparseMatrix = Eigen::SparseMatrix<double, Eigen::ColMajor, int>;
using Triplet = Eigen::Triplet<double, int>;

/// Stacked user-major preference vector: coordinates [d*i, d*i + d) belong to user i.
using StackedVector = Eigen::VectorXd;

using Rng = std::mt19937_64;

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Raised by the sparse factorization when a pivot is not positive.
class NotPositiveDefinite : public Error {
 public:
  NotPositiveDefinite(int pivot, double value)
      : Error(format(pivot, value)), pivot_(pivot), value_(value) {}

  int pivot() const { return pivot_; }
  double value() const { return value_; }

 private:
  static std::string format(int pivot, double value) {
    std::ostringstream os;
    os << "matrix is not positive definite: pivot at node " << pivot << " has value " << value;
    return os.str();
  }

  int pivot_;
  double value_;
};

namespace detail {

template <typename... Args>
std::string concat(Args&&... args) {
  std::ostringstream os;
  (os << ... << std::forward<Args>(args));
  return os.str();
}

}  // namespace detail

template <typename E = Error, typename... Args>
[[noreturn]] void fail(Args&&... args) {
  throw E(detail::concat(std::forward<Args>(args)...));
}

/// SplitMix64 finalizer, used to derive independent seeds for forked streams.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline Rng fork_rng(std::uint64_t seed, std::uint64_t stream) { return Rng(mix_seed(seed, stream)); }

/// Fills `out` with i.i.d. standard normals in column-major order (ziggurat sampler).
template <typename Derived>
void fill_normal(Eigen::DenseBase<Derived>& out, Rng& rng) {
  boost::random::normal_distribution<double> normal(0.0, 1.0);
  for (Eigen::Index j = 0; j < out.cols(); ++j)
    for (Eigen::Index i = 0; i < out.rows(); ++i) out(i, j) = normal(rng);
}

inline double uniform01(Rng& rng) { return std::uniform_real_distribution<double>(0.0, 1.0)(rng); }

inline int uniform_index(Rng& rng, int count) {
  return std::uniform_int_distribution<int>(0, count - 1)(rng);
}

}  // namespace gob
