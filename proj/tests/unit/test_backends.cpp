#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "mmfsod/backends.hpp"
#include "mmfsod/errors.hpp"

using namespace mmfsod;

namespace {

QueryFeatureMap random_map(int h, int w, int d, std::uint64_t stream) {
  return QueryFeatureMap(h, w, hashrng::normal_matrix(21, stream, h * w, d));
}

// Independent bilinear sampler in cell-center coordinates with edge clamping.
RowVector bilinear(const QueryFeatureMap& fm, double x, double y) {
  const double gx = std::clamp(x * fm.width() - 0.5, 0.0, fm.width() - 1.0);
  const double gy = std::clamp(y * fm.height() - 0.5, 0.0, fm.height() - 1.0);
  const int x0 = static_cast<int>(std::floor(gx)), y0 = static_cast<int>(std::floor(gy));
  const int x1 = std::min(x0 + 1, fm.width() - 1), y1 = std::min(y0 + 1, fm.height() - 1);
  const double fx = gx - x0, fy = gy - y0;
  auto at = [&](int r, int c) { return RowVector(fm.values().row(r * fm.width() + c)); };
  return (1 - fy) * ((1 - fx) * at(y0, x0) + fx * at(y0, x1)) + fy * ((1 - fx) * at(y1, x0) + fx * at(y1, x1));
}

}  // namespace

TEST(Box, IouAndValidation) {
  EXPECT_DOUBLE_EQ(iou(Box{0, 0, 0.5, 0.5}, Box{0, 0, 0.5, 0.5}), 1.0);
  EXPECT_DOUBLE_EQ(iou(Box{0, 0, 0.5, 0.5}, Box{0.5, 0.5, 1, 1}), 0.0);
  EXPECT_NEAR(iou(Box{0, 0, 0.5, 0.5}, Box{0.25, 0, 0.75, 0.5}), 1.0 / 3.0, 1e-15);
  EXPECT_THROW(check_box(Box{0.5, 0, 0.4, 1}), std::invalid_argument);
  EXPECT_THROW(check_box(Box{0, 0, 1.1, 1}), std::invalid_argument);
  EXPECT_NO_THROW(check_box(Box{0, 0, 1, 1}));
}

TEST(Box, CoveredPositions) {
  EXPECT_EQ(covered_positions(4, 4, Box{0, 0, 0.5, 0.5}), (std::vector<int>{0, 1, 4, 5}));
  // No cell center inside: the cell containing the box center.
  EXPECT_EQ(covered_positions(4, 4, Box{0.26, 0.26, 0.3, 0.3}), (std::vector<int>{5}));
  EXPECT_EQ(covered_positions(2, 2, Box{0, 0, 1, 1}).size(), 4u);
}

TEST(SyntheticBackend, DeterministicPerSeed) {
  SyntheticBackend b;
  const auto a1 = b.extract_query_features(ImageRef{0, std::nullopt}, 2, 2, 4);
  const auto a2 = b.extract_query_features(ImageRef{0, std::nullopt}, 2, 2, 4);
  const auto c = b.extract_query_features(ImageRef{1, std::nullopt}, 2, 2, 4);
  EXPECT_EQ(a1.values().rows(), 4);
  EXPECT_EQ(a1.values().cols(), 4);
  EXPECT_EQ(a1.values(), a2.values());
  EXPECT_NE(a1.values(), c.values());
}

TEST(SyntheticBackend, NoiseFloorIsStandardNormal) {
  SyntheticBackend b;
  const Matrix v = b.extract_query_features(ImageRef{7, std::nullopt}, 16, 16, 64).values();
  const double mean = v.mean();
  const double var = (v.array() - mean).square().mean();
  EXPECT_NEAR(mean, 0.0, 0.05);
  EXPECT_NEAR(var, 1.0, 0.05);
}

TEST(SyntheticBackend, TensorImagesLoadFromNpy) {
  const auto path = std::filesystem::temp_directory_path() / "mmfsod_backend_tensor.npy";
  const Matrix v = hashrng::normal_matrix(4, 4, 6, 3);
  save_npy_features(path, 2, 3, v);
  SyntheticBackend b;
  EXPECT_EQ(b.extract_query_features(ImageRef{0, path}, 2, 3, 3).values(), v);
  EXPECT_THROW(b.extract_query_features(ImageRef{0, path}, 3, 2, 3), ShapeError);
  std::filesystem::remove(path);
}

TEST(SyntheticBackend, RejectsEmptyGrid) {
  SyntheticBackend b;
  EXPECT_THROW(b.extract_query_features(ImageRef{}, 0, 2, 4), std::invalid_argument);
  EXPECT_THROW(b.extract_query_features(ImageRef{}, 2, 2, 0), std::invalid_argument);
}

TEST(SyntheticBackend, TokenEmbeddings) {
  SyntheticBackend b;
  const auto e = b.embed_tokens(TokenSequence{{0, 1}}, 10, 8);
  EXPECT_EQ(e.values.rows(), 2);
  EXPECT_EQ(e.values, b.embed_tokens(TokenSequence{{0, 1}}, 10, 8).values);
  const auto x = b.embed_tokens(TokenSequence{{0, 4, 5, 1}}, 10, 8).values;
  const auto y = b.embed_tokens(TokenSequence{{0, 6, 5, 1}}, 10, 8).values;
  for (int r = 0; r < 4; ++r) {
    if (r == 1)
      EXPECT_NE(x.row(r), y.row(r));
    else
      EXPECT_EQ(x.row(r), y.row(r));
  }
  EXPECT_THROW(b.embed_tokens(TokenSequence{{0, 10, 1}}, 10, 8), std::out_of_range);
}

TEST(SyntheticBackend, TokenRowIsTokenVectorPlusSinusoid) {
  SyntheticBackend b;
  const auto e = b.embed_tokens(TokenSequence{{0, 7, 1}}, 10, 6).values;
  const Matrix pe = sinusoidal_table(3, 6);
  EXPECT_LT((e.row(1) - SyntheticBackend::token_vector(7, 6) - pe.row(1)).cwiseAbs().maxCoeff(), 1e-15);
  EXPECT_EQ(SyntheticBackend::token_table(10, 6).row(7), SyntheticBackend::token_vector(7, 6));
}

TEST(BackendRegistry, UnknownSelectionsFailLoudly) {
  EXPECT_EQ(make_backend("synthetic")->name(), "synthetic");
  EXPECT_THROW(make_backend("external:missing"), BackendError);
  EXPECT_THROW(make_backend("clip"), BackendError);
}

TEST(BackendRegistry, ExternalBackendIsSelectable) {
  register_external_backend("stub", [] { return std::make_unique<SyntheticBackend>(); });
  EXPECT_EQ(make_backend("external:stub")->name(), "synthetic");
  unregister_external_backend("stub");
  EXPECT_THROW(make_backend("external:stub"), BackendError);
}

TEST(RoiAlign, ConstantMapGivesConstant) {
  RowVector v(3);
  v << 1.5, -2, 0.25;
  const QueryFeatureMap fm(4, 5, v.replicate(20, 1));
  for (int out : {1, 2, 3, 7}) {
    const auto f = roi_align_pool(fm, Box{0.13, 0.2, 0.71, 0.9}, out, out);
    EXPECT_LT((f.values - v).cwiseAbs().maxCoeff(), 1e-12) << out;
  }
}

TEST(RoiAlign, FullBoxAlignedGridIsMean) {
  const auto fm = random_map(4, 3, 5, 1);
  const auto f = roi_align_pool(fm, Box{0, 0, 1, 1}, 4, 3);
  EXPECT_LT((f.values - fm.values().colwise().mean()).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(RoiAlign, CornerMapCenterIsBilinear) {
  Matrix v(4, 1);
  v << 1, 2, 3, 10;
  const QueryFeatureMap fm(2, 2, v);
  EXPECT_NEAR(roi_align_pool(fm, Box{0, 0, 1, 1}, 1, 1).values(0), 4.0, 1e-12);
}

TEST(RoiAlign, MatchesIndependentBilinearOracle) {
  const auto fm = random_map(5, 6, 3, 2);
  const Box box{0.1, 0.27, 0.66, 0.95};
  RowVector expected = RowVector::Zero(3);
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 3; ++j)
      expected += bilinear(fm, box.x0 + (j + 0.5) * box.width() / 3, box.y0 + (i + 0.5) * box.height() / 2);
  expected /= 6.0;
  EXPECT_LT((roi_align_pool(fm, box, 2, 3).values - expected).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(RoiAlign, IsLinearInFeatureMap) {
  const Box box{0.2, 0.05, 0.8, 0.6};
  for (std::uint64_t s = 0; s < 10; ++s) {
    const auto f = random_map(6, 6, 4, 10 + s), g = random_map(6, 6, 4, 50 + s);
    const double a = 0.7 - 0.1 * s, b = -1.3 + 0.2 * s;
    const QueryFeatureMap mix(6, 6, a * f.values() + b * g.values());
    const RowVector lhs = roi_align_pool(mix, box, 2, 2).values;
    const RowVector rhs = a * roi_align_pool(f, box, 2, 2).values + b * roi_align_pool(g, box, 2, 2).values;
    EXPECT_LT((lhs - rhs).cwiseAbs().maxCoeff(), 1e-10);
  }
}

TEST(RoiAlign, WeightsReproducePooling) {
  const auto fm = random_map(5, 4, 3, 3);
  const Box box{0.3, 0.1, 0.9, 0.7};
  const RowVector w = roi_align_weights(5, 4, box, 2, 2);
  EXPECT_NEAR(w.sum(), 1.0, 1e-12);
  EXPECT_LT((w * fm.values() - roi_align_pool(fm, box, 2, 2).values).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(RoiAlign, RejectsDegenerateBoxes) {
  const auto fm = random_map(4, 4, 2, 4);
  EXPECT_THROW(roi_align_pool(fm, Box{0.5, 0.5, 0.5000001, 0.6}, 2, 2), std::invalid_argument);
  EXPECT_THROW(roi_align_pool(fm, Box{0.6, 0.5, 0.5, 0.6}, 2, 2), std::invalid_argument);
  EXPECT_THROW(roi_align_pool(fm, Box{0, 0, 1, 1}, 0, 2), std::invalid_argument);
}

TEST(Npy, RoundTrip) {
  const auto path = std::filesystem::temp_directory_path() / "mmfsod_features.npy";
  const Matrix v = hashrng::normal_matrix(3, 3, 12, 5);
  save_npy_features(path, 3, 4, v);
  int h = 0, w = 0;
  EXPECT_EQ(load_npy_features(path, h, w), v);
  EXPECT_EQ(h, 3);
  EXPECT_EQ(w, 4);
  std::filesystem::remove(path);
  EXPECT_THROW(load_npy_features(path, h, w), std::exception);
}
