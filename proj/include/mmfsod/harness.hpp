#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "mmfsod/model.hpp"

namespace mmfsod {

struct RunConfig {
  std::uint64_t seed = 0;
  int dim = 32;
  int heads = 4;
  int ways = 3;
  int shots = 5;
  SamplingStrategy strategy = SamplingStrategy::balanced_instances;
  TextChoice text_variant = TextChoice::manual;
  std::string backend = "synthetic";
  double rect_weight = 1.0;
  bool normalize_rect = false;
  double learning_rate = 1e-3;
  double task_lr_scale = 1.0;
  int batch_size = 0;  // 0: 4 episodes per step for 1-shot, otherwise 1
  int steps = 500;
  std::string optimizer = "sgd";
  int eval_every = 100;
  int eval_episodes = 10;
  int height = 8;
  int width = 8;
  int roi_size = 2;
  // "synthetic" generates a catalog from the fields below; anything else is a catalog file.
  std::string catalog = "synthetic";
  std::string corpus = "richtext_corpus.json";
  std::vector<std::string> novel;  // empty: the last `novel_categories` catalog categories
  int novel_categories = 3;
  double base_novel_ratio = 1.0;
  int synthetic_categories = 14;
  int synthetic_images = 30;
  Separability separability = Separability::vision_separable;
  double object_amplitude = 6.0;
  double scene_amplitude = 6.0;
  bool language = true;
  bool rectify = true;
  bool decoupled_attention = false;

  int effective_batch() const { return batch_size > 0 ? batch_size : (shots == 1 ? 4 : 1); }
  // Throws ValidationError for unknown keys or unparsable values.
  void set(const std::string& key, const std::string& value);
  void validate() const;
  nlohmann::json to_json() const;
  static RunConfig from_json(const nlohmann::json& j);
};

// A JSON object or `key = value` lines (# comments allowed).
RunConfig parse_run_config(std::string_view text);
RunConfig load_run_config(const std::filesystem::path& path);

// MMFSOD_DATA_ROOT when set, otherwise the directory shipped with the sources.
std::filesystem::path data_root();
std::filesystem::path resolve_data_path(const std::string& path);

struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  std::vector<std::pair<std::string, Matrix>> tensors;
  nlohmann::json config;
  std::uint64_t step = 0;
  int vocab_size = 0;

  const Matrix* find(const std::string& name) const;
  // "MMFSODCK", u32 version, u64 manifest length, JSON manifest, then raw
  // little-endian doubles in manifest order.
  std::string serialize() const;
  static Checkpoint deserialize(std::string_view bytes);
  void save(const std::filesystem::path& path) const;
  static Checkpoint load(const std::filesystem::path& path);
};

Checkpoint snapshot(MultiModalDetector& model, const RunConfig& config, std::uint64_t step, int vocab_size);
// Throws ValidationError when a tensor is missing or has the wrong shape.
void restore(MultiModalDetector& model, const Checkpoint& checkpoint);

struct TrainingData {
  CategoryCatalog catalog;
  Corpus corpus;
  Vocabulary vocab;
  CategorySplit split;
};

TrainingData load_training_data(const RunConfig& config);
ModelConfig model_config(const RunConfig& config, int vocab_size);

class Optimizer {
 public:
  virtual ~Optimizer() = default;
  virtual void step(nn::ParamList& params, const std::vector<Matrix>& grads) = 0;

  // Multiplies the learning rate of the parameter called `name`.
  void set_rate_scale(const std::string& name, double scale) { scales_[name] = scale; }

 protected:
  double rate_scale(const std::string& name) const {
    const auto it = scales_.find(name);
    return it == scales_.end() ? 1.0 : it->second;
  }

 private:
  std::map<std::string, double> scales_;
};

class GradientDescent final : public Optimizer {
 public:
  explicit GradientDescent(double lr) : lr_(lr) {}
  void step(nn::ParamList& params, const std::vector<Matrix>& grads) override;

 private:
  double lr_;
};

class Adam final : public Optimizer {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}
  void step(nn::ParamList& params, const std::vector<Matrix>& grads) override;

 private:
  double lr_, beta1_, beta2_, eps_;
  std::vector<Matrix> m_, v_;
  int t_ = 0;
};

std::unique_ptr<Optimizer> make_optimizer(const RunConfig& config);

struct EvalReport {
  double map = 0.0;
  std::map<std::string, double> per_category_ap;
  double accuracy = 0.0;
  int objects = 0;

  nlohmann::json to_json() const;
};

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<nlohmann::json> metrics;
  EvalReport final_eval;
};

// Episodic training. Each metrics line is {step, loss_det, loss_rect, acc, map};
// acc and map are null except on evaluation steps. Throws NumericalError
// naming the step and the offending term on a non-finite loss or gradient.
TrainResult train(const RunConfig& config, std::ostream* metrics_out = nullptr);

// Held-out episodes drawn from the novel categories (base when there are none).
EvalReport evaluate_model(const MultiModalDetector& model, const TrainingData& data, const RunConfig& config,
                          std::ostream* detections_out = nullptr);
// Throws ValidationError when the checkpoint's d differs from the config's.
EvalReport evaluate(const Checkpoint& checkpoint, const RunConfig& config, std::ostream* detections_out = nullptr);

struct GradcheckReport {
  std::string module;
  double max_relative_error = 0.0;
  std::size_t entries = 0;
  bool passed = false;
};

// |a - n| / max(|a|, |n|, floor)
double relative_error(double analytic, double numeric, double floor = 1e-3);

// Central differences with eps 1e-4 on one random instance. Modules:
// task_encoding, foreground_filter, aggregate, shared_encode,
// rectification_loss, rectifier. Unknown names throw std::invalid_argument.
GradcheckReport gradcheck(const std::string& module, std::uint64_t seed, double tolerance = 1e-4);
const std::vector<std::string>& gradcheck_modules();

struct LengthStats {
  int count = 0;
  double mean_tokens = 0.0;
  int min_tokens = 0;
  int max_tokens = 0;
};

struct CorpusReport {
  std::vector<std::string> errors;
  // dataset -> variant -> token-length statistics
  std::map<std::string, std::map<std::string, LengthStats>> lengths;
  std::vector<std::string> notes;

  nlohmann::json to_json() const;
};

// Never throws for bad content; parse and schema failures become errors.
CorpusReport corpus_validate(const std::filesystem::path& path);

}  // namespace mmfsod
