#pragma once

#include <functional>
#include <vector>

#include "mmfsod/autograd.hpp"

namespace mmfsod::testing {

// Central-difference gradient of a scalar function of one matrix.
inline Matrix numeric_gradient(const std::function<double()>& f, Matrix& x, double eps = 1e-5) {
  Matrix g(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double keep = x.data()[i];
    x.data()[i] = keep + eps;
    const double up = f();
    x.data()[i] = keep - eps;
    const double down = f();
    x.data()[i] = keep;
    g.data()[i] = (up - down) / (2 * eps);
  }
  return g;
}

inline double max_abs_diff(const Matrix& a, const Matrix& b) { return (a - b).cwiseAbs().maxCoeff(); }

// Scalar projection sum(out .* w) so every output entry receives a distinct gradient.
inline ag::Var project(ag::Tape& tape, ag::Var out, const Matrix& w) {
  return ag::sum(ag::hadamard(out, tape.constant(w)));
}

}  // namespace mmfsod::testing
