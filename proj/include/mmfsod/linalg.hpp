#pragma once

#include <cmath>
#include <cstdint>
#include <string>

#include <Eigen/Dense>

#include "mmfsod/errors.hpp"

namespace mmfsod {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;

inline void require_shape(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

inline std::string shape_str(const Matrix& m) {
  return "(" + std::to_string(m.rows()) + "x" + std::to_string(m.cols()) + ")";
}

// Numerically stable row-wise softmax.
Matrix softmax_rows(const Matrix& logits);

Matrix sigmoid(const Matrix& x);

// Row-wise log-sum-exp, returned as a column.
Vector logsumexp_rows(const Matrix& logits);

// Sinusoidal table: out(k, 2i) = sin(k / 10000^(2i/d)), out(k, 2i+1) = cos(...).
// d must be even.
Matrix sinusoidal_table(int rows, int d);

// Counter-based deterministic randomness. Every draw is a pure function of
// (seed, stream, index), so generated tensors do not depend on call order or
// on the standard library's distribution implementations.
namespace hashrng {

std::uint64_t mix(std::uint64_t x);
std::uint64_t combine(std::uint64_t seed, std::uint64_t stream, std::uint64_t index);
// Uniform in the open interval (0, 1).
double uniform(std::uint64_t seed, std::uint64_t stream, std::uint64_t index);
double normal(std::uint64_t seed, std::uint64_t stream, std::uint64_t index);
std::uint64_t hash_string(const std::string& s);

// rows x cols matrix of iid N(0, 1) draws.
Matrix normal_matrix(std::uint64_t seed, std::uint64_t stream, int rows, int cols);

}  // namespace hashrng

// Small sequential generator on top of hashrng for sampling code that
// consumes a stream of draws (shuffles, choices).
class SeededStream {
 public:
  explicit SeededStream(std::uint64_t seed, std::uint64_t stream = 0) : seed_(seed), stream_(stream) {}

  double uniform() { return hashrng::uniform(seed_, stream_, counter_++); }
  double normal() { return hashrng::normal(seed_, stream_, counter_++); }
  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);

  template <typename It>
  void shuffle(It first, It last) {
    const auto n = static_cast<std::uint64_t>(last - first);
    for (std::uint64_t i = n; i > 1; --i) {
      std::swap(first[i - 1], first[below(i)]);
    }
  }

 private:
  std::uint64_t seed_;
  std::uint64_t stream_;
  std::uint64_t counter_ = 0;
};

}  // namespace mmfsod
