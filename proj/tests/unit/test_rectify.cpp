#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "mmfsod/harness.hpp"
#include "mmfsod/rectify.hpp"
#include "test_util.hpp"

using namespace mmfsod;

namespace {

Matrix rnd(int r, int c, std::uint64_t stream, double scale = 1.0) {
  return scale * hashrng::normal_matrix(41, stream, r, c);
}

TokenSequence random_sequence(int m, int vocab, std::uint64_t seed) {
  SeededStream rng(seed, 3);
  TokenSequence s;
  s.ids.push_back(Vocabulary::kBos);
  for (int j = 1; j + 1 < m; ++j) s.ids.push_back(Vocabulary::kReserved + static_cast<int>(rng.below(vocab - 4)));
  s.ids.push_back(Vocabulary::kEos);
  return s;
}

Matrix reverse_rows(const Matrix& m) { return m.colwise().reverse(); }

// Direct per-token NLL summation.
double oracle_loss(const std::vector<Matrix>& fwd, const std::vector<Matrix>& bwd,
                   const std::vector<TokenSequence>& truth) {
  double total = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const auto& w = truth[i].ids;
    const auto m = w.size();
    for (std::size_t j = 1; j < m; ++j) {
      const auto row = fwd[i].row(static_cast<Eigen::Index>(j - 1));
      total -= std::log(std::exp(row(w[j])) / row.array().exp().sum());
    }
    for (std::size_t j = 0; j + 1 < m; ++j) {
      const auto row = bwd[i].row(static_cast<Eigen::Index>(j));
      total -= std::log(std::exp(row(w[j])) / row.array().exp().sum());
    }
  }
  return 0.5 * total;
}

std::vector<SequencePrediction> wrap(const std::vector<Matrix>& logits, Direction d) {
  std::vector<SequencePrediction> out;
  for (const auto& l : logits) out.push_back({l, d});
  return out;
}

}  // namespace

TEST(Composite, Examples) {
  const Matrix q = rnd(6, 4, 1);
  EXPECT_EQ(composite_feature(RowVector::Zero(4), q).values, q / 2);
  const RowVector s = rnd(1, 4, 2);
  const Matrix rows = composite_feature(s, s.replicate(5, 1)).values;
  for (int r = 0; r < 5; ++r) EXPECT_LT((rows.row(r) - s).cwiseAbs().maxCoeff(), 1e-15);
  const Matrix p = composite_feature(s, q).values;
  for (int r = 0; r < 6; ++r)
    for (int c = 0; c < 4; ++c) EXPECT_NEAR(p(r, c), (q(r, c) + s(c)) / 2, 1e-12);
  EXPECT_THROW(composite_feature(RowVector::Zero(3), q), ShapeError);
}

TEST(CausalMask, Directions) {
  const Matrix f = causal_mask(3, Direction::forward), b = causal_mask(3, Direction::backward);
  Matrix ef(3, 3), eb(3, 3);
  ef << 1, 0, 0, 1, 1, 0, 1, 1, 1;
  eb << 1, 1, 1, 0, 1, 1, 0, 0, 1;
  EXPECT_EQ(f, ef);
  EXPECT_EQ(b, eb);
}

TEST(DirectionTargets, IndexRanges) {
  const TokenSequence s{{0, 7, 8, 1}};
  EXPECT_EQ(direction_targets(s, Direction::forward), (std::vector<int>{7, 8, 1}));
  EXPECT_EQ(direction_targets(s, Direction::backward), (std::vector<int>{0, 7, 8}));
  EXPECT_EQ(direction_targets(TokenSequence{{0, 1}}, Direction::forward), (std::vector<int>{1}));
  EXPECT_EQ(direction_targets(TokenSequence{{0, 1}}, Direction::backward), (std::vector<int>{0}));
  EXPECT_THROW(direction_targets(TokenSequence{{0}}, Direction::forward), std::invalid_argument);
}

TEST(Rectifier, MinimalSequenceHasOneTargetPerDirection) {
  RectifierModel model(8, 10, RectifierOptions{}, 1);
  const TokenEmbeddingSequence tokens{rnd(2, 8, 3)};
  const CompositeFeature p{rnd(16, 8, 4)};
  const auto f = model.predict_sequence(tokens, p, Direction::forward);
  const auto b = model.predict_sequence(tokens, p, Direction::backward);
  EXPECT_EQ(f.logits.rows(), 1);
  EXPECT_EQ(b.logits.rows(), 1);
  EXPECT_EQ(f.logits.cols(), 10);
  EXPECT_EQ(model.vocab_size(), 10);
}

TEST(Rectifier, RejectsShortSequencesAndWidthMismatch) {
  RectifierModel model(8, 10, RectifierOptions{}, 1);
  EXPECT_THROW(model.predict_sequence({rnd(1, 8, 3)}, {rnd(4, 8, 4)}, Direction::forward), std::invalid_argument);
  EXPECT_THROW(model.predict_sequence({rnd(3, 6, 3)}, {rnd(4, 8, 4)}, Direction::forward), ShapeError);
  EXPECT_THROW(model.predict_sequence({rnd(3, 8, 3)}, {rnd(4, 6, 4)}, Direction::forward), ShapeError);
}

TEST(Rectifier, Deterministic) {
  RectifierModel a(8, 12, RectifierOptions{}, 5), b(8, 12, RectifierOptions{}, 5);
  const TokenEmbeddingSequence tokens{rnd(5, 8, 5)};
  const CompositeFeature p{rnd(9, 8, 6)};
  EXPECT_EQ(a.predict_sequence(tokens, p, Direction::forward).logits,
            b.predict_sequence(tokens, p, Direction::forward).logits);
}

TEST(Rectifier, ForwardPredictionIgnoresFutureTokens) {
  RectifierModel model(8, 12, RectifierOptions{}, 6);
  const CompositeFeature p{rnd(9, 8, 7)};
  Matrix x = rnd(5, 8, 8);
  const Matrix before = model.predict_sequence({x}, p, Direction::forward).logits;
  x.row(4) = rnd(1, 8, 9);
  const Matrix after = model.predict_sequence({x}, p, Direction::forward).logits;
  // Logit rows 0..3 come from positions 0..3, none of which can see position 4.
  EXPECT_LT((before - after).cwiseAbs().maxCoeff(), 1e-14);

  const Matrix bwd_before = model.predict_sequence({x}, p, Direction::backward).logits;
  x.row(0) = rnd(1, 8, 10);
  const Matrix bwd_after = model.predict_sequence({x}, p, Direction::backward).logits;
  EXPECT_LT((bwd_before - bwd_after).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(RectificationLoss, ZeroUnderCertainPredictions) {
  const std::vector<TokenSequence> truth{random_sequence(5, 9, 1), random_sequence(3, 9, 2)};
  std::vector<Matrix> fwd, bwd;
  for (const auto& t : truth) {
    Matrix f = Matrix::Constant(static_cast<Eigen::Index>(t.length()) - 1, 9, -1000.0), b = f;
    const auto ft = direction_targets(t, Direction::forward), bt = direction_targets(t, Direction::backward);
    for (std::size_t r = 0; r < ft.size(); ++r) {
      f(static_cast<Eigen::Index>(r), ft[r]) = 0.0;
      b(static_cast<Eigen::Index>(r), bt[r]) = 0.0;
    }
    fwd.push_back(f);
    bwd.push_back(b);
  }
  EXPECT_EQ(rectification_loss(wrap(fwd, Direction::forward), wrap(bwd, Direction::backward), truth), 0.0);
}

TEST(RectificationLoss, UniformClosedForm) {
  for (int c : {1, 2, 3})
    for (int m : {2, 4, 7})
      for (int v : {4, 16}) {
        std::vector<TokenSequence> truth;
        for (int i = 0; i < c; ++i) truth.push_back(random_sequence(m, std::max(v, 5), i));
        if (v == 4)
          for (auto& t : truth) std::fill(t.ids.begin() + 1, t.ids.end() - 1, 3);
        const std::vector<Matrix> uniform(static_cast<std::size_t>(c), Matrix::Zero(m - 1, v));
        const double loss =
            rectification_loss(wrap(uniform, Direction::forward), wrap(uniform, Direction::backward), truth);
        EXPECT_NEAR(loss, c * (m - 1) * std::log(static_cast<double>(v)), 1e-9);
      }
  const std::vector<TokenSequence> one{TokenSequence{{0, 1}}};
  const std::vector<Matrix> u{Matrix::Zero(1, 4)};
  EXPECT_NEAR(rectification_loss(wrap(u, Direction::forward), wrap(u, Direction::backward), one), 1.386294, 1e-6);
}

TEST(RectificationLoss, MatchesPerTokenOracleAndIsNonNegative) {
  for (std::uint64_t s = 0; s < 20; ++s) {
    const std::vector<TokenSequence> truth{random_sequence(5, 16, s), random_sequence(4, 16, s + 100)};
    std::vector<Matrix> fwd, bwd;
    for (std::size_t i = 0; i < truth.size(); ++i) {
      fwd.push_back(rnd(static_cast<int>(truth[i].length()) - 1, 16, 200 + 10 * s + i, 3.0));
      bwd.push_back(rnd(static_cast<int>(truth[i].length()) - 1, 16, 400 + 10 * s + i, 3.0));
    }
    const double loss = rectification_loss(wrap(fwd, Direction::forward), wrap(bwd, Direction::backward), truth);
    EXPECT_NEAR(loss, oracle_loss(fwd, bwd, truth), 1e-10);
    EXPECT_GT(loss, 0.0);
  }
}

TEST(RectificationLoss, MirrorSymmetry) {
  // Reversing a sequence swaps the roles of the two directions.
  const TokenSequence w = random_sequence(6, 12, 7);
  TokenSequence rev = w;
  std::reverse(rev.ids.begin(), rev.ids.end());
  const Matrix f = rnd(5, 12, 50), b = rnd(5, 12, 51);
  const double original = rectification_loss({{f, Direction::forward}}, {{b, Direction::backward}}, {w});
  const double mirrored =
      rectification_loss({{reverse_rows(b), Direction::forward}}, {{reverse_rows(f), Direction::backward}}, {rev});
  EXPECT_NEAR(original, mirrored, 1e-12);
}

TEST(RectificationLoss, MisalignmentThrows) {
  const std::vector<TokenSequence> truth{TokenSequence{{0, 5, 1}}};
  const Matrix ok = Matrix::Zero(2, 8), short_rows = Matrix::Zero(1, 8), narrow = Matrix::Zero(2, 4);
  EXPECT_THROW(rectification_loss({{short_rows, Direction::forward}}, {{ok, Direction::backward}}, truth),
               std::invalid_argument);
  EXPECT_THROW(rectification_loss({{ok, Direction::forward}}, {{ok, Direction::backward}}, {}), std::invalid_argument);
  EXPECT_THROW(rectification_loss({{narrow, Direction::forward}}, {{narrow, Direction::backward}}, truth),
               std::invalid_argument);
  EXPECT_THROW(rectification_loss({{ok, Direction::backward}}, {{ok, Direction::forward}}, truth),
               std::invalid_argument);
}

TEST(RectificationLoss, AnalyticGradientMatchesFiniteDifferences) {
  for (std::uint64_t s = 0; s < 20; ++s) {
    const std::vector<TokenSequence> truth{random_sequence(5, 16, s), random_sequence(5, 16, s + 50)};
    std::vector<Matrix> fwd{rnd(4, 16, 600 + s), rnd(4, 16, 700 + s)};
    std::vector<Matrix> bwd{rnd(4, 16, 800 + s), rnd(4, 16, 900 + s)};
    auto loss = [&] { return rectification_loss(wrap(fwd, Direction::forward), wrap(bwd, Direction::backward), truth); };
    const RectificationGrad g =
        rectification_loss_grad(wrap(fwd, Direction::forward), wrap(bwd, Direction::backward), truth);
    for (std::size_t i = 0; i < 2; ++i) {
      const Matrix nf = mmfsod::testing::numeric_gradient(loss, fwd[i], 1e-4);
      const Matrix nb = mmfsod::testing::numeric_gradient(loss, bwd[i], 1e-4);
      for (Eigen::Index k = 0; k < nf.size(); ++k) {
        EXPECT_LE(relative_error(g.forward[i].data()[k], nf.data()[k]), 1e-4);
        EXPECT_LE(relative_error(g.backward[i].data()[k], nb.data()[k]), 1e-4);
      }
    }
  }
}

TEST(RectificationLoss, TapeVersionMatchesPlainVersion) {
  const std::vector<TokenSequence> truth{random_sequence(4, 10, 3)};
  const Matrix f = rnd(3, 10, 60), b = rnd(3, 10, 61);
  ag::Tape tape;
  Matrix fv = f, bv = b;
  ag::Var loss = rectification_loss(std::vector<ag::Var>{tape.param(fv)}, std::vector<ag::Var>{tape.param(bv)}, truth);
  EXPECT_NEAR(loss.value()(0, 0), rectification_loss({{f, Direction::forward}}, {{b, Direction::backward}}, truth),
              1e-12);
  tape.backward(loss);
  const RectificationGrad g = rectification_loss_grad({{f, Direction::forward}}, {{b, Direction::backward}}, truth);
  EXPECT_LT((tape.grad_of(fv) - g.forward[0]).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LT((tape.grad_of(bv) - g.backward[0]).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(RectificationLoss, DirectionsDoNotShareTargetGradients) {
  RectifierModel model(8, 12, RectifierOptions{}, 9);
  const TokenSequence truth = random_sequence(5, 12, 4);
  const Matrix tokens = rnd(5, 8, 70), comp = rnd(6, 8, 71);
  Matrix& fwd_dir = model.direction_embedding(Direction::forward);
  Matrix& bwd_dir = model.direction_embedding(Direction::backward);

  ag::Tape full;
  ag::Var f = model.predict(full, full.constant(tokens), full.constant(comp), Direction::forward);
  ag::Var b = model.predict(full, full.constant(tokens), full.constant(comp), Direction::backward);
  full.backward(rectification_loss(std::vector<ag::Var>{f}, std::vector<ag::Var>{b}, {truth}));

  // Same loss with the backward logits frozen: forward-side gradients must not change.
  ag::Tape fwd_only;
  ag::Var f2 = model.predict(fwd_only, fwd_only.constant(tokens), fwd_only.constant(comp), Direction::forward);
  fwd_only.backward(rectification_loss(std::vector<ag::Var>{f2}, std::vector<ag::Var>{fwd_only.constant(b.value())},
                                       {truth}));
  EXPECT_EQ(full.grad_of(fwd_dir), fwd_only.grad_of(fwd_dir));
  EXPECT_FALSE(fwd_only.received_grad(bwd_dir));
  EXPECT_TRUE(full.received_grad(bwd_dir));
}

TEST(Rectifier, GradcheckPasses) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const GradcheckReport r = gradcheck("rectifier", seed);
    EXPECT_TRUE(r.passed) << r.max_relative_error;
  }
}
