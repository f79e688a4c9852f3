#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "mmfsod/aggregation.hpp"
#include "mmfsod/harness.hpp"
#include "test_util.hpp"

using namespace mmfsod;

namespace {

Matrix rnd(int r, int c, std::uint64_t stream, double scale = 1.0) {
  return scale * hashrng::normal_matrix(31, stream, r, c);
}

// Brute-force softmax(Q S^T / sqrt(d)) one entry at a time.
Matrix oracle_matching(const Matrix& q, const Matrix& s) {
  Matrix a(q.rows(), s.rows());
  for (Eigen::Index p = 0; p < q.rows(); ++p) {
    double z = 0;
    for (Eigen::Index c = 0; c < s.rows(); ++c) {
      double dot = 0;
      for (Eigen::Index k = 0; k < q.cols(); ++k) dot += q(p, k) * s(c, k);
      a(p, c) = std::exp(dot / std::sqrt(static_cast<double>(q.cols())));
      z += a(p, c);
    }
    a.row(p) /= z;
  }
  return a;
}

Matrix oracle_sigmoid(const Matrix& x) { return (1.0 / (1.0 + (-x.array()).exp())).matrix(); }

// Dense multi-head self-attention + residual + layer norm, written from the weights directly.
Matrix oracle_encode(SharedAttentionLayer& layer, const Matrix& x) {
  const auto& att = layer.attention();
  const int d = layer.dim(), h = att.heads, dh = d / h;
  auto lin = [](const nn::Linear& l, const Matrix& in) {
    Matrix out = in * l.weight;
    out.rowwise() += RowVector(l.bias.row(0));
    return out;
  };
  const Matrix q = lin(att.query, x), k = lin(att.key, x), v = lin(att.value, x);
  Matrix merged(x.rows(), d);
  for (int head = 0; head < h; ++head) {
    const Matrix qh = q.middleCols(head * dh, dh), kh = k.middleCols(head * dh, dh), vh = v.middleCols(head * dh, dh);
    Matrix w = qh * kh.transpose() / std::sqrt(static_cast<double>(dh));
    for (Eigen::Index r = 0; r < w.rows(); ++r) {
      const double m = w.row(r).maxCoeff();
      w.row(r) = (w.row(r).array() - m).exp().matrix();
      w.row(r) /= w.row(r).sum();
    }
    merged.middleCols(head * dh, dh) = w * vh;
  }
  Matrix y = x + lin(att.output, merged);
  for (Eigen::Index r = 0; r < y.rows(); ++r) {
    const double mean = y.row(r).mean();
    const double var = (y.row(r).array() - mean).square().mean();
    y.row(r) = ((y.row(r).array() - mean) / std::sqrt(var + 1e-5)).matrix();
  }
  return y;
}

}  // namespace

TEST(TaskPrototypes, SinusoidalInit) {
  const TaskPrototypes t = init_task_prototypes(5, 8);
  for (int c = 0; c < 8; ++c) EXPECT_DOUBLE_EQ(t.values(0, c), c % 2 == 0 ? 0.0 : 1.0);
  EXPECT_NEAR(t.values(1, 0), 0.841471, 1e-6);
  EXPECT_DOUBLE_EQ(t.values(1, 0), std::sin(1.0));
  EXPECT_LE(t.values.cwiseAbs().maxCoeff(), 1.0);
  EXPECT_EQ(t.slice(2).rows(), 3);
  EXPECT_THROW(init_task_prototypes(4, 7), std::invalid_argument);
}

TEST(Fusion, Examples) {
  const Matrix vision = rnd(4, 6, 1);
  const PrototypeSet same = fuse_prototypes(vision, vision.topRows(3), RowVector::Zero(6));
  EXPECT_EQ(same.values().topRows(3), vision.topRows(3));
  EXPECT_EQ(same.background_index(), 3);

  const PrototypeSet half = fuse_prototypes(vision, Matrix::Zero(3, 6), RowVector::Zero(6));
  EXPECT_EQ(half.values(), vision / 2);

  Matrix v(2, 2), l(1, 2);
  v << 1, 0, 0, 0;
  l << 0, 1;
  const PrototypeSet s = fuse_prototypes(v, l, RowVector::Zero(2));
  EXPECT_DOUBLE_EQ(s.values()(0, 0), 0.5);
  EXPECT_DOUBLE_EQ(s.values()(0, 1), 0.5);
}

TEST(Fusion, BackgroundRowUsesBackgroundText) {
  const Matrix vision = rnd(3, 4, 2);
  const RowVector b = rnd(1, 4, 3);
  const PrototypeSet s = fuse_prototypes(vision, rnd(2, 4, 4), b);
  EXPECT_LT((s.values().row(2) - (vision.row(2) + b) / 2).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Fusion, ShapeMismatchThrows) {
  EXPECT_THROW(fuse_prototypes(rnd(4, 6, 1), rnd(2, 6, 2), RowVector::Zero(6)), ShapeError);
  EXPECT_THROW(fuse_prototypes(rnd(4, 6, 1), rnd(3, 5, 2), RowVector::Zero(6)), ShapeError);
  EXPECT_THROW(fuse_prototypes(rnd(4, 6, 1), rnd(3, 6, 2), RowVector::Zero(5)), ShapeError);
}

TEST(Matching, UniformWhenOrthogonal) {
  Matrix q = Matrix::Zero(3, 4), s = Matrix::Zero(4, 4);
  q.col(0).setOnes();
  s.col(1) = Vector::LinSpaced(4, -1, 2);
  const Matrix a = feature_matching_coefficients(q, s);
  EXPECT_LT((a.array() - 0.25).abs().maxCoeff(), 1e-12);
}

TEST(Matching, ScalarExample) {
  Matrix q(1, 1), s(2, 1);
  q << 2;
  s << 1, -1;
  // d = 1 so the scale is 1.
  const Matrix a = feature_matching_coefficients(q, s);
  EXPECT_NEAR(a(0, 0), 0.982014, 1e-6);
  EXPECT_NEAR(a(0, 1), 0.017986, 1e-6);
}

TEST(Matching, MatchesBruteForceOracle) {
  const Matrix q = rnd(6, 32, 5), s = rnd(4, 32, 6);
  const Matrix a = feature_matching_coefficients(q, s);
  EXPECT_LT((a - oracle_matching(q, s)).cwiseAbs().maxCoeff(), 1e-8);
  EXPECT_LT((a.rowwise().sum().array() - 1.0).abs().maxCoeff(), 1e-12);
}

TEST(Matching, RowStochasticOverManyDraws) {
  for (std::uint64_t i = 0; i < 1000; ++i) {
    SeededStream rng(i, 7);
    const int hw = 1 + static_cast<int>(rng.below(16)), c = 2 + static_cast<int>(rng.below(5)),
              d = 1 + static_cast<int>(rng.below(16));
    const Matrix a = feature_matching_coefficients(rnd(hw, d, 100 + i, 3.0), rnd(c, d, 5000 + i, 3.0));
    ASSERT_LT((a.rowwise().sum().array() - 1.0).abs().maxCoeff(), 1e-6);
  }
}

TEST(Matching, OrthogonalShiftLeavesCoefficientsUnchanged) {
  Matrix s = rnd(3, 5, 7);
  s.col(4).setZero();
  Matrix q = rnd(4, 5, 8);
  Matrix shifted = q;
  shifted.col(4).array() += 2.5;
  EXPECT_LT((feature_matching_coefficients(q, s) - feature_matching_coefficients(shifted, s)).cwiseAbs().maxCoeff(),
            1e-15);
  Matrix non_orthogonal = q;
  non_orthogonal.col(0).array() += 2.5;
  EXPECT_GT((feature_matching_coefficients(q, s) - feature_matching_coefficients(non_orthogonal, s))
                .cwiseAbs()
                .maxCoeff(),
            1e-6);
}

TEST(ForegroundFilter, Saturation) {
  const Matrix q = rnd(5, 4, 9);
  const Matrix a = softmax_rows(rnd(5, 3, 10));
  EXPECT_LT(foreground_filter(a, Matrix::Constant(3, 4, -40.0), q).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(ForegroundFilter, OneHotOntoZeroPrototypeHalvesQuery) {
  const Matrix q = rnd(4, 3, 11);
  Matrix a = Matrix::Zero(4, 3);
  a.col(1).setOnes();
  Matrix s = rnd(3, 3, 12);
  s.row(1).setZero();
  EXPECT_LT((foreground_filter(a, s, q) - 0.5 * q).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(ForegroundFilter, MatchesOracle) {
  const Matrix q = rnd(6, 8, 13), s = rnd(4, 8, 14);
  const Matrix a = oracle_matching(q, s);
  const Matrix expected = ((a * oracle_sigmoid(s)).array() * q.array()).matrix();
  EXPECT_LT((foreground_filter(a, s, q) - expected).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(TaskEncoding, OneHotSelectsRows) {
  const Matrix t = rnd(4, 6, 15);
  Matrix a = Matrix::Zero(3, 4);
  a(0, 2) = a(1, 0) = a(2, 3) = 1;
  const Matrix q2 = task_encoding(a, t);
  EXPECT_EQ(q2.row(0), t.row(2));
  EXPECT_EQ(q2.row(1), t.row(0));
  EXPECT_EQ(q2.row(2), t.row(3));
}

TEST(TaskEncoding, UniformAveragesRows) {
  const Matrix t = rnd(4, 6, 16);
  const Matrix q2 = task_encoding(Matrix::Constant(2, 4, 0.25), t);
  for (int r = 0; r < 2; ++r) EXPECT_LT((q2.row(r) - t.colwise().mean()).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(TaskEncoding, MatchesMatmul) {
  const Matrix a = softmax_rows(rnd(5, 4, 17)), t = rnd(4, 8, 18);
  EXPECT_LT((task_encoding(a, t) - a * t).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(Aggregate, ZeroQueryGivesUniformTaskMean) {
  const Matrix s = rnd(4, 6, 19), t = rnd(6, 6, 20);
  const Matrix out = aggregate(Matrix::Zero(3, 6), s, t);
  for (int r = 0; r < 3; ++r) EXPECT_LT((out.row(r) - t.topRows(4).colwise().mean()).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Aggregate, EqualsIndependentQ1PlusQ2) {
  for (std::uint64_t i = 0; i < 100; ++i) {
    SeededStream rng(i, 8);
    const int hw = 1 + static_cast<int>(rng.below(16)), c = 1 + static_cast<int>(rng.below(5)),
              d = 1 + static_cast<int>(rng.below(16));
    const Matrix q = rnd(hw, d, 200 + i), s = rnd(c + 1, d, 400 + i), t = rnd(c + 3, d, 600 + i);
    const Matrix a = oracle_matching(q, s);
    const Matrix q1 = ((a * oracle_sigmoid(s)).array() * q.array()).matrix();
    const Matrix q2 = a * t.topRows(c + 1);
    ASSERT_LT((aggregate(q, s, t) - (q1 + q2)).cwiseAbs().maxCoeff(), 1e-10) << i;
  }
}

TEST(Aggregate, TypedOverloadMatchesMatrixForm) {
  const Matrix q = rnd(6, 8, 21), s = rnd(4, 8, 22);
  const TaskPrototypes t = init_task_prototypes(5, 8);
  EXPECT_EQ(aggregate(QueryFeatureMap(2, 3, q), PrototypeSet(s), t), aggregate(q, s, t.values));
}

TEST(Aggregate, PermutingCategoriesAndTaskRows) {
  const int c = 4, d = 8;
  const Matrix q = rnd(6, d, 23), s = rnd(c + 1, d, 24), t = rnd(c + 1, d, 25);
  std::vector<int> perm(c);
  std::iota(perm.begin(), perm.end(), 0);
  SeededStream rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    rng.shuffle(perm.begin(), perm.end());
    Matrix sp = s, tp = t;
    for (int i = 0; i < c; ++i) {
      sp.row(i) = s.row(perm[i]);
      tp.row(i) = t.row(perm[i]);
    }
    const Matrix a = feature_matching_coefficients(q, s), ap = feature_matching_coefficients(q, sp);
    for (int i = 0; i < c; ++i) EXPECT_LT((ap.col(i) - a.col(perm[i])).cwiseAbs().maxCoeff(), 1e-15);
    EXPECT_LT((foreground_filter(ap, sp, q) - foreground_filter(a, s, q)).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LT((aggregate(q, sp, tp) - aggregate(q, s, t)).cwiseAbs().maxCoeff(), 1e-10);
  }
}

TEST(Aggregate, TapeVersionMatchesPlainVersion) {
  const Matrix q = rnd(6, 8, 26), s = rnd(4, 8, 27), t = rnd(4, 8, 28);
  ag::Tape tape;
  const agg::Output o = agg::aggregate(tape.constant(q), tape.constant(s), tape.constant(t));
  const Matrix a = feature_matching_coefficients(q, s);
  EXPECT_LT((o.coefficients.value() - a).cwiseAbs().maxCoeff(), 1e-14);
  EXPECT_LT((o.foreground.value() - foreground_filter(a, s, q)).cwiseAbs().maxCoeff(), 1e-14);
  EXPECT_LT((o.task.value() - task_encoding(a, t)).cwiseAbs().maxCoeff(), 1e-14);
  EXPECT_LT((o.aggregated.value() - aggregate(q, s, t)).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(Aggregate, GradientsMatchFiniteDifferences) {
  for (std::uint64_t i = 0; i < 20; ++i) {
    Matrix q = rnd(6, 8, 700 + i), s = rnd(4, 8, 800 + i), t = rnd(4, 8, 900 + i);
    const Matrix w = rnd(6, 8, 1000 + i);
    auto value = [&] { return (aggregate(q, s, t).array() * w.array()).sum(); };
    ag::Tape tape;
    tape.backward(mmfsod::testing::project(tape, agg::aggregate(tape.param(q), tape.param(s), tape.param(t)).aggregated, w));
    for (Matrix* m : {&q, &s, &t}) {
      const Matrix analytic = tape.grad_of(*m);
      const Matrix numeric = mmfsod::testing::numeric_gradient(value, *m, 1e-4);
      double worst = 0;
      for (Eigen::Index k = 0; k < analytic.size(); ++k)
        worst = std::max(worst, relative_error(analytic.data()[k], numeric.data()[k]));
      EXPECT_LE(worst, 1e-4);
    }
  }
}

TEST(Aggregate, ShapeMismatchThrows) {
  EXPECT_THROW(aggregate(rnd(3, 4, 1), rnd(3, 5, 2), rnd(3, 4, 3)), ShapeError);
  EXPECT_THROW(aggregate(rnd(3, 4, 1), rnd(4, 4, 2), rnd(3, 4, 3)), ShapeError);
}

TEST(SharedEncode, ZeroOutputProjectionIsLayerNorm) {
  SharedAttentionLayer layer(8, 2, 1);
  layer.attention().output.weight.setZero();
  layer.attention().output.bias.setZero();
  const Matrix x = rnd(1, 8, 29);
  const Matrix y = layer.encode(x);
  const double mean = x.mean(), var = (x.array() - mean).square().mean();
  EXPECT_LT((y - ((x.array() - mean) / std::sqrt(var + 1e-5)).matrix()).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(SharedEncode, IdenticalRowsStayIdentical) {
  SharedAttentionLayer layer(8, 2, 2);
  const Matrix x = rnd(1, 8, 30).replicate(4, 1);
  const Matrix y = layer.encode(x);
  for (int r = 1; r < 4; ++r) EXPECT_LT((y.row(r) - y.row(0)).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(SharedEncode, PermutationEquivariantOverPositions) {
  SharedAttentionLayer layer(8, 4, 3);
  const Matrix x = rnd(5, 8, 31);
  const std::vector<int> perm{3, 0, 4, 1, 2};
  Matrix xp(5, 8);
  for (int r = 0; r < 5; ++r) xp.row(r) = x.row(perm[r]);
  const Matrix y = layer.encode(x), yp = layer.encode(xp);
  for (int r = 0; r < 5; ++r) EXPECT_LT((yp.row(r) - y.row(perm[r])).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(SharedEncode, MatchesDenseAttentionOracle) {
  SharedAttentionLayer layer(32, 4, 4);
  const Matrix x = rnd(3, 32, 32);
  EXPECT_LT((layer.encode(x) - oracle_encode(layer, x)).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(SharedEncode, WidthMismatchThrows) {
  SharedAttentionLayer layer(8, 2, 5);
  EXPECT_THROW(layer.encode(rnd(3, 6, 33)), ShapeError);
  EXPECT_THROW(SharedAttentionLayer(8, 3, 5), std::invalid_argument);
}

TEST(SharedEncode, SharedLayerIsBitIdenticalAcrossModalitiesDecoupledIsNot) {
  const Matrix x = rnd(4, 8, 34);
  SharedAttentionLayer shared(8, 2, 6, 0x10);
  EXPECT_EQ(shared.encode(x), shared.encode(x));
  SharedAttentionLayer vision(8, 2, 6, 0x10), language(8, 2, 6, 0x20);
  EXPECT_GT((vision.encode(x) - language.encode(x)).cwiseAbs().maxCoeff(), 1e-6);
}
