#include "mmfsod/linalg.hpp"

#include <limits>

namespace mmfsod {

Matrix softmax_rows(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const double m = logits.row(r).maxCoeff();
    out.row(r) = (logits.row(r).array() - m).exp();
    out.row(r) /= out.row(r).sum();
  }
  return out;
}

Matrix sigmoid(const Matrix& x) {
  return x.unaryExpr([](double v) {
    if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
    const double e = std::exp(v);
    return e / (1.0 + e);
  });
}

Vector logsumexp_rows(const Matrix& logits) {
  Vector out(logits.rows());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const double m = logits.row(r).maxCoeff();
    out(r) = m + std::log((logits.row(r).array() - m).exp().sum());
  }
  return out;
}

Matrix sinusoidal_table(int rows, int d) {
  if (d <= 0 || d % 2 != 0) throw std::invalid_argument("sinusoidal_table: d must be positive and even");
  Matrix t(rows, d);
  for (int k = 0; k < rows; ++k) {
    for (int i = 0; i < d / 2; ++i) {
      const double freq = std::pow(10000.0, (2.0 * i) / d);
      t(k, 2 * i) = std::sin(k / freq);
      t(k, 2 * i + 1) = std::cos(k / freq);
    }
  }
  return t;
}

namespace hashrng {

std::uint64_t mix(std::uint64_t x) {
  // splitmix64 finalizer
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t combine(std::uint64_t seed, std::uint64_t stream, std::uint64_t index) {
  return mix(mix(mix(seed) ^ stream) ^ index);
}

double uniform(std::uint64_t seed, std::uint64_t stream, std::uint64_t index) {
  const std::uint64_t bits = combine(seed, stream, index) >> 11;  // 53 bits
  return (static_cast<double>(bits) + 0.5) * (1.0 / 9007199254740992.0);
}

double normal(std::uint64_t seed, std::uint64_t stream, std::uint64_t index) {
  // Box-Muller on two decorrelated uniforms derived from the same counter.
  const double u1 = uniform(seed, stream, 2 * index);
  const double u2 = uniform(seed, stream, 2 * index + 1);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

std::uint64_t hash_string(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return mix(h);
}

Matrix normal_matrix(std::uint64_t seed, std::uint64_t stream, int rows, int cols) {
  Matrix m(rows, cols);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) m(r, c) = normal(seed, stream, static_cast<std::uint64_t>(r) * cols + c);
  return m;
}

}  // namespace hashrng

std::uint64_t SeededStream::below(std::uint64_t n) {
  if (n == 0) throw std::invalid_argument("SeededStream::below: n must be positive");
  auto v = static_cast<std::uint64_t>(uniform() * static_cast<double>(n));
  return v >= n ? n - 1 : v;
}

}  // namespace mmfsod
