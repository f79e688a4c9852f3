#pragma once

#include <cstdint>

#include "mmfsod/autograd.hpp"
#include "mmfsod/backends.hpp"
#include "mmfsod/nn.hpp"

// Multi-modal support/query aggregation.
//
// Support prototypes S hold one fused vision+language row per episode category
// followed by the background row. Query positions are matched against S with a
// single-head softmax (coefficients A); the output is the foreground-filtered
// query (A sigmoid(S)) .* Q plus the task encoding A T, where T are class-agnostic
// prototypes shared across episodes.
namespace mmfsod {

// (C+1) x d, background last.
class PrototypeSet {
 public:
  explicit PrototypeSet(Matrix rows);

  const Matrix& values() const { return rows_; }
  int categories() const { return static_cast<int>(rows_.rows()) - 1; }
  int dim() const { return static_cast<int>(rows_.cols()); }
  int background_index() const { return categories(); }

 private:
  Matrix rows_;
};

struct TaskPrototypes {
  Matrix values;  // rows >= C+1 of any episode

  // First C+1 rows.
  Matrix slice(int categories) const;
};

// Sinusoidal initialization; throws std::invalid_argument for odd d.
TaskPrototypes init_task_prototypes(int rows, int d);

// Self-attention + residual + layer norm, one instance serving every modality.
class SharedAttentionLayer {
 public:
  SharedAttentionLayer() = default;
  SharedAttentionLayer(int dim, int heads, std::uint64_t seed, std::uint64_t stream = 1);

  int dim() const { return attention_.dim(); }
  int heads() const { return attention_.heads; }

  ag::Var encode(ag::Tape& tape, ag::Var seq) const;
  // Throws ShapeError when seq width differs from the layer width.
  Matrix encode(const Matrix& seq) const;

  nn::MultiHeadAttention& attention() { return attention_; }
  const nn::MultiHeadAttention& attention() const { return attention_; }
  void collect(const std::string& prefix, nn::ParamList& out);

 private:
  nn::MultiHeadAttention attention_;
  nn::LayerNorm norm_;
};

// S[i] = (vision[i] + language[i]) / 2 for i < C; S[C] = (vision[C] + background_text) / 2.
PrototypeSet fuse_prototypes(const Matrix& vision, const Matrix& language, const RowVector& background_text);

// A = softmax(Q S^T / sqrt(d)), row-wise.
Matrix feature_matching_coefficients(const Matrix& query, const Matrix& prototypes);
// Q1 = (A sigmoid(S)) .* Q
Matrix foreground_filter(const Matrix& coefficients, const Matrix& prototypes, const Matrix& query);
// Q2 = A T
Matrix task_encoding(const Matrix& coefficients, const Matrix& task_slice);
// Q1 + Q2. `task` may have more than C+1 rows; the first C+1 are used.
Matrix aggregate(const Matrix& query, const Matrix& prototypes, const Matrix& task);
Matrix aggregate(const QueryFeatureMap& query, const PrototypeSet& prototypes, const TaskPrototypes& task);

// Differentiable counterparts used by the training graph.
namespace agg {

struct Output {
  ag::Var coefficients;
  ag::Var foreground;
  ag::Var task;
  ag::Var aggregated;
};

ag::Var fuse(ag::Var vision, ag::Var language, ag::Var background_text);
ag::Var matching(ag::Var query, ag::Var prototypes);
Output aggregate(ag::Var query, ag::Var prototypes, ag::Var task_slice);

}  // namespace agg

}  // namespace mmfsod
