#include "mmfsod/model.hpp"

#include <algorithm>

namespace mmfsod {

RenderCache::RenderCache(const CategoryCatalog& catalog, const FeatureBackend& backend, int height, int width, int dim)
    : catalog_(catalog), backend_(backend), height_(height), width_(width), dim_(dim) {}

const Matrix& RenderCache::features(int sample) {
  auto it = maps_.find(sample);
  if (it == maps_.end())
    it = maps_.emplace(sample, render_sample(catalog_, backend_, sample, height_, width_, dim_).values()).first;
  return it->second;
}

EpisodeInputs prepare_episode(RenderCache& cache, const Episode& episode, const Vocabulary& vocab, int roi_size) {
  EpisodeInputs in;
  in.height = cache.height();
  in.width = cache.width();
  const int h = in.height, w = in.width, n = episode.ways();
  std::vector<RowVector> background_rows;
  for (const auto& sc : episode.support) {
    Matrix rows(static_cast<Eigen::Index>(sc.instances.size()), cache.dim());
    for (std::size_t i = 0; i < sc.instances.size(); ++i) {
      const auto& inst = sc.instances[i];
      rows.row(static_cast<Eigen::Index>(i)) = roi_align_weights(h, w, inst.box, roi_size, roi_size) *
                                               cache.features(inst.sample);
    }
    in.support.push_back(std::move(rows));
    for (int s : sc.images) {
      const Box crop = background_crop(cache.catalog(), s, h, w, hashrng::combine(episode.seed, 0xB6, s));
      background_rows.push_back(roi_align_weights(h, w, crop, roi_size, roi_size) * cache.features(s));
    }
    in.texts.push_back(tokenize(sc.text.text, vocab));
  }
  in.background.resize(static_cast<Eigen::Index>(background_rows.size()), cache.dim());
  for (std::size_t r = 0; r < background_rows.size(); ++r) in.background.row(static_cast<Eigen::Index>(r)) = background_rows[r];

  in.rectify_query.assign(static_cast<std::size_t>(n), -1);
  for (std::size_t q = 0; q < episode.query.size(); ++q) {
    const auto& qi = episode.query[q];
    in.queries.push_back(cache.features(qi.sample));
    in.targets.push_back(assign_targets(h, w, qi.boxes, qi.labels, n));
    in.query_boxes.push_back(qi.boxes);
    in.query_labels.push_back(qi.labels);
    for (int label : qi.labels)
      if (in.rectify_query[static_cast<std::size_t>(label)] < 0) in.rectify_query[static_cast<std::size_t>(label)] = static_cast<int>(q);
  }
  for (auto& r : in.rectify_query)
    if (r < 0) r = 0;
  return in;
}

MultiModalDetector::MultiModalDetector(const ModelConfig& config)
    : config_(config),
      vision_(config.dim, config.heads, config.seed, 0x10),
      task_(init_task_prototypes(config.max_way + 1, config.dim).values),
      background_text_(Matrix::Zero(1, config.dim)),
      embeddings_(SyntheticBackend::token_table(config.vocab_size, config.dim)),
      rectifier_(config.dim, config.vocab_size, config.rectifier, config.seed),
      head_(config.dim, config.max_way, config.seed) {
  if (config.decoupled_attention) language_ = SharedAttentionLayer(config.dim, config.heads, config.seed, 0x20);
}

nn::ParamList MultiModalDetector::parameters() {
  nn::ParamList out;
  vision_.collect(config_.decoupled_attention ? "vision_attention" : "shared_attention", out);
  if (config_.decoupled_attention) language_.collect("language_attention", out);
  out.push_back({"aggregation.task_prototypes", &task_});
  out.push_back({"aggregation.background_text", &background_text_});
  out.push_back({"text.embeddings", &embeddings_});
  rectifier_.collect("rectifier", out);
  head_.collect("head", out);
  return out;
}

ForwardResult MultiModalDetector::forward(ag::Tape& tape, const EpisodeInputs& in, const ForwardOptions& opt) const {
  const int n = in.ways();
  if (n < 1 || n > config_.max_way)
    throw std::invalid_argument("forward: episode has " + std::to_string(n) + " ways, model supports up to " +
                                std::to_string(config_.max_way));
  if (in.queries.empty()) throw std::invalid_argument("forward: episode has no query images");
  const int d = config_.dim;

  std::vector<ag::Var> vision_rows;
  for (const auto& s : in.support) vision_rows.push_back(ag::mean_rows(vision_.encode(tape, tape.constant(s))));
  vision_rows.push_back(ag::mean_rows(vision_.encode(tape, tape.constant(in.background))));
  ag::Var vision = ag::concat_rows(vision_rows);

  ForwardResult out;
  std::vector<ag::Var> token_states;
  if (opt.language) {
    std::vector<ag::Var> language_rows;
    ag::Var table = tape.param(embeddings_);
    for (const auto& seq : in.texts) {
      check_sequence(seq, config_.vocab_size);
      const auto m = static_cast<int>(seq.length());
      ag::Var tokens = ag::add(ag::gather_rows(table, seq.ids), tape.constant(sinusoidal_table(m, d)));
      ag::Var encoded = language().encode(tape, tokens);
      token_states.push_back(encoded);
      language_rows.push_back(ag::mean_rows(encoded));
    }
    out.prototypes = agg::fuse(vision, ag::concat_rows(language_rows), tape.param(background_text_));
  } else {
    out.prototypes = vision;
  }

  ag::Var task = ag::slice_rows(tape.param(task_), 0, n + 1);
  std::vector<ag::Var> encoded_queries;
  std::vector<ag::Var> det_terms;
  for (std::size_t q = 0; q < in.queries.size(); ++q) {
    ag::Var enc = vision_.encode(tape, tape.constant(in.queries[q]));
    encoded_queries.push_back(enc);
    agg::Output a = agg::aggregate(enc, out.prototypes, task);
    auto [cls, box] = head_.forward(tape, a.aggregated, n);
    out.class_logits.push_back(cls);
    out.box_offsets.push_back(box);
    det_terms.push_back(detection_loss(cls, box, in.targets[q]));
  }
  out.loss_det = ag::scale(ag::sum(ag::concat_rows(det_terms)), 1.0 / static_cast<double>(det_terms.size()));

  if (opt.language && opt.rectify) {
    std::vector<ag::Var> fwd, bwd;
    double targets = 0.0;
    for (int c = 0; c < n; ++c) {
      ag::Var p = composite_feature(ag::slice_rows(out.prototypes, c, 1),
                                    encoded_queries[static_cast<std::size_t>(in.rectify_query[static_cast<std::size_t>(c)])]);
      fwd.push_back(rectifier_.predict(tape, token_states[static_cast<std::size_t>(c)], p, Direction::forward));
      bwd.push_back(rectifier_.predict(tape, token_states[static_cast<std::size_t>(c)], p, Direction::backward));
      targets += static_cast<double>(in.texts[static_cast<std::size_t>(c)].length() - 1);
    }
    out.loss_rect = rectification_loss(fwd, bwd, in.texts);
    if (opt.normalize_rect) out.loss_rect = ag::scale(out.loss_rect, 1.0 / targets);
  }
  out.total = out.loss_det;
  if (out.loss_rect.valid() && opt.rect_weight != 0.0)
    out.total = ag::add(out.loss_det, ag::scale(out.loss_rect, opt.rect_weight));
  return out;
}

std::vector<HeadOutput> MultiModalDetector::predict(const EpisodeInputs& inputs, bool language) const {
  ag::Tape tape;
  ForwardOptions opt;
  opt.language = language;
  opt.rectify = false;
  ForwardResult r = forward(tape, inputs, opt);
  std::vector<HeadOutput> out;
  for (std::size_t q = 0; q < r.class_logits.size(); ++q)
    out.push_back(HeadOutput{r.class_logits[q].value(), r.box_offsets[q].value()});
  return out;
}

std::pair<int, int> query_accuracy(const std::vector<HeadOutput>& outputs, const EpisodeInputs& in) {
  const int n = in.ways();
  int correct = 0, total = 0;
  for (std::size_t q = 0; q < outputs.size(); ++q) {
    const Matrix probs = softmax_rows(outputs[q].class_logits);
    for (std::size_t b = 0; b < in.query_boxes[q].size(); ++b) {
      RowVector mean = RowVector::Zero(probs.cols());
      const auto cells = covered_positions(in.height, in.width, in.query_boxes[q][b]);
      for (int pos : cells) mean += probs.row(pos);
      Eigen::Index best = 0;
      mean.head(n).maxCoeff(&best);
      correct += static_cast<int>(best) == in.query_labels[q][b] ? 1 : 0;
      ++total;
    }
  }
  return {correct, total};
}

}  // namespace mmfsod
