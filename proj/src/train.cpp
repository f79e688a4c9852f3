#include <cmath>

#include "mmfsod/harness.hpp"

namespace mmfsod {

using nlohmann::json;

namespace {

constexpr std::uint64_t kTrainStream = 0x7EA1;
constexpr std::uint64_t kEvalStream = 0xE7A1;

CategorySplit default_split(const CategoryCatalog& catalog, const RunConfig& config) {
  SplitSpec spec;
  const int total = static_cast<int>(catalog.categories.size());
  if (config.novel.empty()) {
    const int novel = std::min(config.novel_categories, total);
    for (int c = 0; c < total; ++c)
      (c < total - novel ? spec.base : spec.novel).push_back(catalog.categories[static_cast<std::size_t>(c)]);
  } else {
    spec.novel = config.novel;
    for (const auto& name : catalog.categories)
      if (std::find(config.novel.begin(), config.novel.end(), name) == config.novel.end()) spec.base.push_back(name);
  }
  return split_base_novel(catalog, spec);
}

void require_finite(double value, const std::string& what, int step) {
  if (!std::isfinite(value))
    throw NumericalError("non-finite " + what + " at step " + std::to_string(step) + " (value " +
                         std::to_string(value) + ")");
}

}  // namespace

TrainingData load_training_data(const RunConfig& config) {
  TrainingData data;
  if (config.catalog == "synthetic") {
    SyntheticSpec spec;
    spec.n_categories = config.synthetic_categories;
    spec.images_per_category = config.synthetic_images;
    spec.height = config.height;
    spec.width = config.width;
    spec.dim = config.dim;
    spec.separability = config.separability;
    spec.seed = config.seed;
    spec.object_amplitude = config.object_amplitude;
    spec.scene_amplitude = config.scene_amplitude;
    SyntheticDataset ds = generate_synthetic_catalog(spec);
    data.catalog = std::move(ds.catalog);
    data.corpus = std::move(ds.corpus);
  } else {
    data.catalog = load_catalog(resolve_data_path(config.catalog));
    if (data.catalog.world) {
      data.corpus = generate_synthetic_catalog(data.catalog.world->spec).corpus;
    } else {
      data.corpus = load_corpus(resolve_data_path(config.corpus));
    }
  }
  data.vocab = catalog_vocabulary(data.catalog, data.corpus);
  data.split = default_split(data.catalog, config);
  return data;
}

ModelConfig model_config(const RunConfig& config, int vocab_size) {
  ModelConfig m;
  m.dim = config.dim;
  m.heads = config.heads;
  m.max_way = config.ways;
  m.vocab_size = vocab_size;
  m.decoupled_attention = config.decoupled_attention;
  m.seed = config.seed;
  return m;
}

void GradientDescent::step(nn::ParamList& params, const std::vector<Matrix>& grads) {
  for (std::size_t i = 0; i < params.size(); ++i) *params[i].value -= lr_ * rate_scale(params[i].name) * grads[i];
}

void Adam::step(nn::ParamList& params, const std::vector<Matrix>& grads) {
  if (m_.empty()) {
    for (const auto& p : params) {
      m_.push_back(Matrix::Zero(p.value->rows(), p.value->cols()));
      v_.push_back(Matrix::Zero(p.value->rows(), p.value->cols()));
    }
  }
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, t_), c2 = 1.0 - std::pow(beta2_, t_);
  for (std::size_t i = 0; i < params.size(); ++i) {
    m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * grads[i];
    v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * grads[i].cwiseProduct(grads[i]);
    const Matrix denom = ((v_[i] / c2).cwiseSqrt().array() + eps_).matrix();
    *params[i].value -= lr_ * rate_scale(params[i].name) * (m_[i] / c1).cwiseQuotient(denom);
  }
}

std::unique_ptr<Optimizer> make_optimizer(const RunConfig& config) {
  std::unique_ptr<Optimizer> opt;
  if (config.optimizer == "adam")
    opt = std::make_unique<Adam>(config.learning_rate);
  else
    opt = std::make_unique<GradientDescent>(config.learning_rate);
  opt->set_rate_scale("aggregation.task_prototypes", config.task_lr_scale);
  return opt;
}

json EvalReport::to_json() const {
  return json{{"map", map}, {"per_category_ap", per_category_ap}, {"acc", accuracy}, {"objects", objects}};
}

EvalReport evaluate_model(const MultiModalDetector& model, const TrainingData& data, const RunConfig& config,
                          std::ostream* detections_out) {
  if (model.config().dim != config.dim)
    throw ValidationError("evaluate: model d=" + std::to_string(model.config().dim) + " but config d=" +
                          std::to_string(config.dim));
  const auto backend = make_backend(config.backend);
  RenderCache cache(data.catalog, *backend, config.height, config.width, config.dim);
  const std::vector<int>& pool = data.split.novel.size() >= static_cast<std::size_t>(config.ways) ? data.split.novel
                                                                                                   : data.split.base;
  std::vector<Detection> detections;
  std::vector<GroundTruthBox> truth;
  int correct = 0, total = 0, image = 0;
  for (int e = 0; e < config.eval_episodes; ++e) {
    const Episode ep = sample_episode(data.catalog, data.corpus, pool, config.ways, config.shots, config.strategy,
                                      config.text_variant, hashrng::combine(config.seed, kEvalStream, e));
    const EpisodeInputs in = prepare_episode(cache, ep, data.vocab, config.roi_size);
    const auto outputs = model.predict(in, config.language);
    const auto [c, t] = query_accuracy(outputs, in);
    correct += c;
    total += t;
    for (std::size_t q = 0; q < outputs.size(); ++q, ++image) {
      for (Detection d : decode_detections(outputs[q], in.height, in.width, in.ways(), image)) {
        d.category = ep.support[static_cast<std::size_t>(d.category)].category;
        detections.push_back(d);
      }
      for (std::size_t b = 0; b < in.query_boxes[q].size(); ++b)
        truth.push_back({image, in.query_boxes[q][b],
                         ep.support[static_cast<std::size_t>(in.query_labels[q][b])].category});
    }
  }
  EvalReport report;
  const MapReport m = compute_map(detections, truth);
  report.map = m.map;
  for (const auto& [c, ap] : m.per_category) report.per_category_ap[data.catalog.categories[static_cast<std::size_t>(c)]] = ap;
  report.accuracy = total > 0 ? static_cast<double>(correct) / total : 0.0;
  report.objects = total;
  if (detections_out) write_detections_jsonl(*detections_out, detections);
  return report;
}

EvalReport evaluate(const Checkpoint& checkpoint, const RunConfig& config, std::ostream* detections_out) {
  const int ck_dim = checkpoint.config.value("d", -1);
  if (ck_dim != config.dim)
    throw ValidationError("checkpoint d=" + std::to_string(ck_dim) + " does not match config d=" +
                          std::to_string(config.dim));
  const TrainingData data = load_training_data(config);
  if (checkpoint.vocab_size != data.vocab.size())
    throw ValidationError("checkpoint vocabulary has " + std::to_string(checkpoint.vocab_size) +
                          " tokens, data yields " + std::to_string(data.vocab.size()));
  MultiModalDetector model(model_config(config, data.vocab.size()));
  restore(model, checkpoint);
  return evaluate_model(model, data, config, detections_out);
}

TrainResult train(const RunConfig& config, std::ostream* metrics_out) {
  config.validate();
  const TrainingData data = load_training_data(config);
  const auto backend = make_backend(config.backend);
  MultiModalDetector model(model_config(config, data.vocab.size()));
  nn::ParamList params = model.parameters();
  auto optimizer = make_optimizer(config);
  RenderCache cache(data.catalog, *backend, config.height, config.width, config.dim);

  ForwardOptions options;
  options.language = config.language;
  options.rectify = config.rectify;
  options.rect_weight = config.rect_weight;
  options.normalize_rect = config.normalize_rect;

  // Unbalanced fine-tuning mixes base and novel episodes; balanced training stays on base.
  const bool mix_novel = config.strategy == SamplingStrategy::unbalanced_images &&
                         data.split.novel.size() >= static_cast<std::size_t>(config.ways);
  const double novel_share = 1.0 / (1.0 + config.base_novel_ratio);

  TrainResult result;
  const int batch = config.effective_batch();
  std::uint64_t episode_counter = 0;
  for (int step = 1; step <= config.steps; ++step) {
    ag::Tape tape;
    std::vector<ag::Var> totals;
    double det_sum = 0.0, rect_sum = 0.0;
    bool have_rect = false;
    for (int b = 0; b < batch; ++b, ++episode_counter) {
      const std::uint64_t ep_seed = hashrng::combine(config.seed, kTrainStream, episode_counter);
      const bool novel = mix_novel && hashrng::uniform(ep_seed, 0x9001, 0) < novel_share;
      const Episode ep = sample_episode(data.catalog, data.corpus, novel ? data.split.novel : data.split.base,
                                        config.ways, config.shots, config.strategy, config.text_variant, ep_seed);
      const EpisodeInputs in = prepare_episode(cache, ep, data.vocab, config.roi_size);
      ForwardResult r = model.forward(tape, in, options);
      const double det = r.loss_det.value()(0, 0);
      require_finite(det, "loss_det", step);
      det_sum += det;
      if (r.loss_rect.valid()) {
        const double rect = r.loss_rect.value()(0, 0);
        require_finite(rect, "loss_rect", step);
        rect_sum += rect;
        have_rect = true;
      }
      totals.push_back(r.total);
    }
    ag::Var objective = ag::scale(ag::sum(ag::concat_rows(totals)), 1.0 / batch);
    tape.backward(objective);
    std::vector<Matrix> grads;
    grads.reserve(params.size());
    for (const auto& p : params) {
      grads.push_back(tape.grad_of(*p.value));
      if (!grads.back().allFinite())
        throw NumericalError("non-finite gradient of " + p.name + " at step " + std::to_string(step));
    }
    optimizer->step(params, grads);

    json line{{"step", step},
              {"loss_det", det_sum / batch},
              {"loss_rect", have_rect ? json(rect_sum / batch) : json(nullptr)},
              {"acc", nullptr},
              {"map", nullptr}};
    if ((config.eval_every > 0 && step % config.eval_every == 0) || step == config.steps) {
      const EvalReport rep = evaluate_model(model, data, config);
      line["acc"] = rep.accuracy;
      line["map"] = rep.map;
      if (step == config.steps) result.final_eval = rep;
    }
    if (metrics_out) *metrics_out << line.dump() << '\n';
    result.metrics.push_back(std::move(line));
  }
  if (config.steps == 0) result.final_eval = evaluate_model(model, data, config);
  result.checkpoint = snapshot(model, config, static_cast<std::uint64_t>(config.steps), data.vocab.size());
  return result;
}

}  // namespace mmfsod
