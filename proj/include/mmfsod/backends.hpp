#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "mmfsod/linalg.hpp"
#include "mmfsod/richtext.hpp"

namespace mmfsod {

// Axis-aligned box in normalized image coordinates.
struct Box {
  double x0 = 0, y0 = 0, x1 = 1, y1 = 1;

  double width() const { return x1 - x0; }
  double height() const { return y1 - y0; }
  double area() const { return width() * height(); }
  double center_x() const { return 0.5 * (x0 + x1); }
  double center_y() const { return 0.5 * (y0 + y1); }
  bool operator==(const Box&) const = default;
};

// Throws std::invalid_argument unless 0 <= x0 < x1 <= 1 and 0 <= y0 < y1 <= 1.
void check_box(const Box& b);
double iou(const Box& a, const Box& b);

// Grid cells (row-major index) whose centers lie inside the box. A box that
// contains no cell center covers the single cell holding its own center.
std::vector<int> covered_positions(int height, int width, const Box& box);

// Per-position features of one image, positions row-major over an H x W grid.
class QueryFeatureMap {
 public:
  QueryFeatureMap(int height, int width, Matrix values);

  int height() const { return height_; }
  int width() const { return width_; }
  int dim() const { return static_cast<int>(values_.cols()); }
  int positions() const { return height_ * width_; }
  const Matrix& values() const { return values_; }
  // Normalized coordinates of a grid cell center.
  double cell_center_x(int col) const { return (col + 0.5) / width_; }
  double cell_center_y(int row) const { return (row + 0.5) / height_; }

 private:
  int height_;
  int width_;
  Matrix values_;
};

struct InstanceFeature {
  RowVector values;
  Box box;
};

// One embedding row per token, aligned with the source TokenSequence.
struct TokenEmbeddingSequence {
  Matrix values;

  std::size_t length() const { return static_cast<std::size_t>(values.rows()); }
};

// What an image is: a synthetic seed, or a raw float tensor stored as .npy.
struct ImageRef {
  std::uint64_t seed = 0;
  std::optional<std::filesystem::path> tensor_path;

  bool operator==(const ImageRef&) const = default;
};

class FeatureBackend {
 public:
  virtual ~FeatureBackend() = default;
  virtual std::string name() const = 0;
  virtual QueryFeatureMap extract_query_features(const ImageRef& image, int height, int width, int dim) const = 0;
  virtual TokenEmbeddingSequence embed_tokens(const TokenSequence& seq, int vocab_size, int dim) const = 0;
};

// Deterministic stand-in for a pretrained vision-language model.
//
// Query features for a seeded image are iid N(0, 1) entries that depend only on
// (seed, H, W, d). A token embedding row is token_vector(id, d) + sinusoid(j, d),
// where token_vector(id, d) has iid N(0, 1) entries fixed per id.
class SyntheticBackend final : public FeatureBackend {
 public:
  std::string name() const override { return "synthetic"; }
  QueryFeatureMap extract_query_features(const ImageRef& image, int height, int width, int dim) const override;
  TokenEmbeddingSequence embed_tokens(const TokenSequence& seq, int vocab_size, int dim) const override;

  static RowVector token_vector(int id, int dim);
  // vocab_size x dim table of token_vector rows.
  static Matrix token_table(int vocab_size, int dim);
};

using BackendFactory = std::function<std::unique_ptr<FeatureBackend>()>;

// Makes "external:<name>" selectable. Re-registering a name replaces it.
void register_external_backend(const std::string& name, BackendFactory factory);
void unregister_external_backend(const std::string& name);
// "synthetic" or "external:<name>". Unknown or unregistered selections throw BackendError.
std::unique_ptr<FeatureBackend> make_backend(std::string_view selection);

// RoIAlign with one bilinear sample per bin center, followed by average pooling.
// Throws std::invalid_argument for invalid or degenerate (area < 1e-6) boxes.
InstanceFeature roi_align_pool(const QueryFeatureMap& fm, const Box& box, int out_h, int out_w);
// The pooling as a 1 x (H*W) weight row: roi_align_pool(fm).values == weights * fm.values().
RowVector roi_align_weights(int height, int width, const Box& box, int out_h, int out_w);

// Minimal .npy support: little-endian float32/float64, C order, shape (H, W, d).
Matrix load_npy_features(const std::filesystem::path& path, int& height, int& width);
void save_npy_features(const std::filesystem::path& path, int height, int width, const Matrix& values);

}  // namespace mmfsod
