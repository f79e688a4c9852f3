#include "mmfsod/detection.hpp"

#include <algorithm>
#include <limits>
#include <numeric>

#include <nlohmann/json.hpp>

namespace mmfsod {

RowVector encode_offsets(const Box& box, double cx, double cy) {
  RowVector o(4);
  o << cx - box.x0, cy - box.y0, box.x1 - cx, box.y1 - cy;
  return o;
}

Box decode_offsets(const RowVector& offsets, double cx, double cy) {
  Box b{std::clamp(cx - offsets(0), 0.0, 1.0), std::clamp(cy - offsets(1), 0.0, 1.0),
        std::clamp(cx + offsets(2), 0.0, 1.0), std::clamp(cy + offsets(3), 0.0, 1.0)};
  // Keep a minimal extent so decoded boxes stay valid.
  constexpr double kMin = 1e-3;
  if (b.x1 - b.x0 < kMin) {
    b.x0 = std::clamp(cx - kMin / 2, 0.0, 1.0 - kMin);
    b.x1 = b.x0 + kMin;
  }
  if (b.y1 - b.y0 < kMin) {
    b.y0 = std::clamp(cy - kMin / 2, 0.0, 1.0 - kMin);
    b.y1 = b.y0 + kMin;
  }
  return b;
}

PositionTargets assign_targets(int height, int width, const std::vector<Box>& boxes, const std::vector<int>& labels,
                               int background_label) {
  if (boxes.size() != labels.size()) throw std::invalid_argument("assign_targets: one label per box");
  const int n = height * width;
  PositionTargets t;
  t.labels.assign(static_cast<std::size_t>(n), background_label);
  t.foreground.assign(static_cast<std::size_t>(n), false);
  t.box_offsets = Matrix::Zero(n, 4);
  std::vector<double> owner_area(static_cast<std::size_t>(n), std::numeric_limits<double>::infinity());
  for (std::size_t b = 0; b < boxes.size(); ++b) {
    check_box(boxes[b]);
    if (labels[b] < 0 || labels[b] >= background_label)
      throw std::invalid_argument("assign_targets: label " + std::to_string(labels[b]) + " out of range");
    for (int pos : covered_positions(height, width, boxes[b])) {
      const auto p = static_cast<std::size_t>(pos);
      if (boxes[b].area() >= owner_area[p]) continue;
      owner_area[p] = boxes[b].area();
      t.labels[p] = labels[b];
      t.foreground[p] = true;
      t.box_offsets.row(pos) = encode_offsets(boxes[b], (pos % width + 0.5) / width, (pos / width + 0.5) / height);
    }
  }
  return t;
}

DetectionHead::DetectionHead(int dim, int max_categories, std::uint64_t seed)
    : classifier_(dim, max_categories + 1, seed, 0x900), regressor_(dim, 4, seed, 0x901) {
  // Aggregated features are large at initialization, so a random regressor
  // starts with offsets far outside the image. Starting from zero boxes is a
  // much shorter path.
  regressor_.weight.setZero();
  regressor_.bias.setZero();
}

HeadOutput DetectionHead::forward(const Matrix& aggregated, int categories) const {
  ag::Tape tape;
  auto [cls, box] = forward(tape, tape.constant(aggregated), categories);
  return HeadOutput{cls.value(), box.value()};
}

std::pair<ag::Var, ag::Var> DetectionHead::forward(ag::Tape& tape, ag::Var aggregated, int categories) const {
  require_shape(aggregated.cols() == classifier_.weight.rows(),
                "head_forward: aggregated width " + std::to_string(aggregated.cols()) + " vs head width " +
                    std::to_string(classifier_.weight.rows()));
  require_shape(categories + 1 <= classifier_.weight.cols(), "head_forward: too many categories for this head");
  ag::Var w = tape.param(classifier_.weight);
  ag::Var b = tape.param(classifier_.bias);
  if (categories + 1 < classifier_.weight.cols()) {
    w = ag::slice_cols(w, 0, categories + 1);
    b = ag::slice_cols(b, 0, categories + 1);
  }
  ag::Var cls = ag::add_row(ag::matmul(aggregated, w), b);
  return {cls, regressor_(tape, aggregated)};
}

void DetectionHead::collect(const std::string& prefix, nn::ParamList& out) {
  classifier_.collect(prefix + ".cls", out);
  regressor_.collect(prefix + ".box", out);
}

DetectionLossTerms detection_loss(const HeadOutput& preds, const PositionTargets& targets,
                                  const DetectionLossWeights& weights) {
  ag::Tape tape;
  ag::Var cls = tape.constant(preds.class_logits);
  ag::Var box = tape.constant(preds.box_offsets);
  DetectionLossTerms terms;
  terms.classification = ag::cross_entropy_rows(cls, targets.labels).value()(0, 0);
  terms.box = ag::l1_rows(box, targets.box_offsets, targets.foreground).value()(0, 0);
  terms.total = weights.classification * terms.classification + weights.box * terms.box;
  return terms;
}

ag::Var detection_loss(ag::Var class_logits, ag::Var box_offsets, const PositionTargets& targets,
                       const DetectionLossWeights& weights) {
  ag::Var ce = ag::cross_entropy_rows(class_logits, targets.labels);
  ag::Var l1 = ag::l1_rows(box_offsets, targets.box_offsets, targets.foreground);
  return ag::add(ag::scale(ce, weights.classification), ag::scale(l1, weights.box));
}

std::vector<Detection> decode_detections(const HeadOutput& preds, int height, int width, int categories, int image,
                                         double nms_iou, double min_score) {
  require_shape(preds.class_logits.rows() == height * width && preds.class_logits.cols() == categories + 1,
                "decode_detections: logits shape");
  const Matrix probs = softmax_rows(preds.class_logits);
  std::vector<Detection> candidates;
  for (int pos = 0; pos < height * width; ++pos) {
    Eigen::Index best = 0;
    probs.row(pos).head(categories).maxCoeff(&best);
    const double score = probs(pos, best);
    if (score < min_score) continue;
    const double cx = (pos % width + 0.5) / width, cy = (pos / width + 0.5) / height;
    candidates.push_back(Detection{image, decode_offsets(preds.box_offsets.row(pos), cx, cy),
                                   static_cast<int>(best), score});
  }
  std::stable_sort(candidates.begin(), candidates.end(),
                   [](const Detection& a, const Detection& b) { return a.score > b.score; });
  std::vector<Detection> kept;
  for (const auto& d : candidates) {
    const bool suppressed = std::any_of(kept.begin(), kept.end(), [&](const Detection& k) {
      return k.category == d.category && iou(k.box, d.box) > nms_iou;
    });
    if (!suppressed) kept.push_back(d);
  }
  return kept;
}

double average_precision(const std::vector<bool>& ranked_true_positive, int ground_truth_count) {
  if (ground_truth_count <= 0) throw std::invalid_argument("average_precision: no ground truth");
  const std::size_t n = ranked_true_positive.size();
  std::vector<double> precision(n);
  int tp = 0;
  for (std::size_t i = 0; i < n; ++i) {
    tp += ranked_true_positive[i] ? 1 : 0;
    precision[i] = static_cast<double>(tp) / static_cast<double>(i + 1);
  }
  // Monotone envelope from the right.
  for (std::size_t i = n; i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
  const double step = 1.0 / ground_truth_count;
  double ap = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    if (ranked_true_positive[i]) ap += step * precision[i];
  return ap;
}

MapReport compute_map(const std::vector<Detection>& detections, const std::vector<GroundTruthBox>& ground_truth,
                      double iou_threshold) {
  if (!(iou_threshold > 0.0 && iou_threshold < 1.0))
    throw std::invalid_argument("compute_map: iou_threshold must lie in (0, 1)");
  if (ground_truth.empty()) throw std::invalid_argument("compute_map: ground truth is empty for every category");
  std::map<int, int> gt_count;
  for (const auto& g : ground_truth) ++gt_count[g.category];

  MapReport report;
  for (const auto& [category, count] : gt_count) {
    std::vector<std::size_t> order;
    for (std::size_t i = 0; i < detections.size(); ++i)
      if (detections[i].category == category) order.push_back(i);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return detections[a].score > detections[b].score; });
    std::vector<bool> matched(ground_truth.size(), false);
    std::vector<bool> ranked_tp;
    ranked_tp.reserve(order.size());
    for (std::size_t idx : order) {
      const Detection& d = detections[idx];
      double best = -1.0;
      std::size_t best_gt = ground_truth.size();
      for (std::size_t g = 0; g < ground_truth.size(); ++g) {
        const auto& gt = ground_truth[g];
        if (matched[g] || gt.category != category || gt.image != d.image) continue;
        const double o = iou(d.box, gt.box);
        if (o > best) {
          best = o;
          best_gt = g;
        }
      }
      const bool tp = best_gt < ground_truth.size() && best >= iou_threshold;
      if (tp) matched[best_gt] = true;
      ranked_tp.push_back(tp);
    }
    report.per_category[category] = average_precision(ranked_tp, count);
  }
  double total = 0.0;
  for (const auto& [c, ap] : report.per_category) total += ap;
  report.map = total / static_cast<double>(report.per_category.size());
  return report;
}

void write_detections_jsonl(std::ostream& out, const std::vector<Detection>& detections) {
  for (const auto& d : detections) {
    nlohmann::json j{{"image", d.image},
                     {"box", {d.box.x0, d.box.y0, d.box.x1, d.box.y1}},
                     {"category", d.category},
                     {"score", d.score}};
    out << j.dump() << '\n';
  }
}

}  // namespace mmfsod
