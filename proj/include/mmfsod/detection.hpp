#pragma once

#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "mmfsod/autograd.hpp"
#include "mmfsod/backends.hpp"
#include "mmfsod/nn.hpp"

namespace mmfsod {

struct Detection {
  int image = 0;
  Box box;
  int category = 0;
  double score = 0.0;
};

struct GroundTruthBox {
  int image = 0;
  Box box;
  int category = 0;
};

// Per-position supervision on an H x W grid (stride 1).
struct PositionTargets {
  std::vector<int> labels;        // C = background
  Matrix box_offsets;             // (H*W) x 4, meaningful on foreground rows
  std::vector<bool> foreground;
};

// Box offsets relative to a cell center: (cx - x0, cy - y0, x1 - cx, y1 - cy).
RowVector encode_offsets(const Box& box, double cx, double cy);
Box decode_offsets(const RowVector& offsets, double cx, double cy);

// Cells whose center lies inside a box take its label (smallest box wins on
// overlap, lower index on ties). A box covering no center claims the cell
// containing its center, so every box covers at least one position.
PositionTargets assign_targets(int height, int width, const std::vector<Box>& boxes, const std::vector<int>& labels,
                               int background_label);

struct HeadOutput {
  Matrix class_logits;  // (H*W) x (C+1)
  Matrix box_offsets;   // (H*W) x 4
};

// Two affine maps over aggregated features. Class columns beyond C+1 are unused
// for episodes with fewer categories.
class DetectionHead {
 public:
  DetectionHead() = default;
  DetectionHead(int dim, int max_categories, std::uint64_t seed);

  HeadOutput forward(const Matrix& aggregated, int categories) const;
  std::pair<ag::Var, ag::Var> forward(ag::Tape& tape, ag::Var aggregated, int categories) const;

  nn::Linear& classifier() { return classifier_; }
  nn::Linear& regressor() { return regressor_; }
  void collect(const std::string& prefix, nn::ParamList& out);

 private:
  nn::Linear classifier_;
  nn::Linear regressor_;
};

struct DetectionLossWeights {
  double classification = 1.0;
  double box = 5.0;
};

struct DetectionLossTerms {
  double classification = 0.0;
  double box = 0.0;
  double total = 0.0;
};

// Summed cross-entropy over positions + weighted L1 over foreground positions.
DetectionLossTerms detection_loss(const HeadOutput& preds, const PositionTargets& targets,
                                  const DetectionLossWeights& weights = {});
ag::Var detection_loss(ag::Var class_logits, ag::Var box_offsets, const PositionTargets& targets,
                       const DetectionLossWeights& weights = {});

// One candidate per position: its most probable foreground class, scored by
// that class probability. Candidates below `min_score` are dropped, then
// greedy per-class suppression at `nms_iou` runs in score order.
std::vector<Detection> decode_detections(const HeadOutput& preds, int height, int width, int categories, int image,
                                         double nms_iou = 0.5, double min_score = 0.0);

struct MapReport {
  double map = 0.0;
  std::map<int, double> per_category;  // categories present in ground truth
};

// Average precision per category as the area under the monotone precision
// envelope, greedy matching in descending score order (ties: lower index
// first), each detection taking the highest-IoU unmatched ground truth of its
// image and category. Throws std::invalid_argument when ground truth is empty.
MapReport compute_map(const std::vector<Detection>& detections, const std::vector<GroundTruthBox>& ground_truth,
                      double iou_threshold = 0.5);

// Precision-envelope AP from a ranked true/false-positive sequence.
double average_precision(const std::vector<bool>& ranked_true_positive, int ground_truth_count);

// {"image":..,"box":[x0,y0,x1,y1],"category":..,"score":..} per line.
void write_detections_jsonl(std::ostream& out, const std::vector<Detection>& detections);

}  // namespace mmfsod
