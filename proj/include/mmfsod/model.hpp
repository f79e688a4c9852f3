#pragma once

#include <cstdint>
#include <map>
#include <vector>

#include "mmfsod/aggregation.hpp"
#include "mmfsod/detection.hpp"
#include "mmfsod/episodes.hpp"
#include "mmfsod/rectify.hpp"

namespace mmfsod {

struct ModelConfig {
  int dim = 32;
  int heads = 4;
  int max_way = 3;
  int vocab_size = 4;
  bool decoupled_attention = false;
  RectifierOptions rectifier;
  std::uint64_t seed = 0;
};

// Tensors of one episode, ready for the forward pass.
struct EpisodeInputs {
  int height = 0;
  int width = 0;
  std::vector<Matrix> support;  // per slot: k_c x d pooled instance features
  Matrix background;            // pooled background crops, one per row
  std::vector<TokenSequence> texts;
  std::vector<Matrix> queries;  // (H*W) x d each
  std::vector<PositionTargets> targets;
  std::vector<std::vector<Box>> query_boxes;
  std::vector<std::vector<int>> query_labels;  // slots
  std::vector<int> rectify_query;              // per slot, index into queries

  int ways() const { return static_cast<int>(support.size()); }
};

// Rendered feature maps of catalog samples, computed on first use.
class RenderCache {
 public:
  RenderCache(const CategoryCatalog& catalog, const FeatureBackend& backend, int height, int width, int dim);
  const Matrix& features(int sample);
  int height() const { return height_; }
  int width() const { return width_; }
  int dim() const { return dim_; }
  const CategoryCatalog& catalog() const { return catalog_; }

 private:
  const CategoryCatalog& catalog_;
  const FeatureBackend& backend_;
  int height_, width_, dim_;
  std::map<int, Matrix> maps_;
};

// Pools support instances and background crops, tokenizes texts and builds query targets.
EpisodeInputs prepare_episode(RenderCache& cache, const Episode& episode, const Vocabulary& vocab, int roi_size);

struct ForwardOptions {
  bool language = true;
  bool rectify = true;
  double rect_weight = 1.0;
  bool normalize_rect = false;
};

struct ForwardResult {
  ag::Var loss_det;
  ag::Var loss_rect;  // invalid when the rectify branch did not run
  ag::Var total;
  ag::Var prototypes;
  std::vector<ag::Var> class_logits;
  std::vector<ag::Var> box_offsets;
};

class MultiModalDetector {
 public:
  explicit MultiModalDetector(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }

  ForwardResult forward(ag::Tape& tape, const EpisodeInputs& inputs, const ForwardOptions& options) const;
  // Inference: no rectify branch, no gradients.
  std::vector<HeadOutput> predict(const EpisodeInputs& inputs, bool language) const;

  // Every trainable tensor under a stable dotted name, in a fixed order.
  nn::ParamList parameters();

  SharedAttentionLayer& vision_layer() { return vision_; }
  SharedAttentionLayer& language_layer() { return config_.decoupled_attention ? language_ : vision_; }
  Matrix& task_prototypes() { return task_; }
  Matrix& background_text() { return background_text_; }
  Matrix& embeddings() { return embeddings_; }
  RectifierModel& rectifier() { return rectifier_; }
  DetectionHead& head() { return head_; }

 private:
  const SharedAttentionLayer& language() const { return config_.decoupled_attention ? language_ : vision_; }

  ModelConfig config_;
  SharedAttentionLayer vision_;
  SharedAttentionLayer language_;
  Matrix task_;
  Matrix background_text_;
  Matrix embeddings_;
  RectifierModel rectifier_;
  DetectionHead head_;
};

// Per ground-truth object: class probabilities averaged over its covered cells,
// argmax over the foreground classes. Returns (correct, total).
std::pair<int, int> query_accuracy(const std::vector<HeadOutput>& outputs, const EpisodeInputs& inputs);

}  // namespace mmfsod
