#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "mmfsod/harness.hpp"

namespace fs = std::filesystem;
using namespace mmfsod;

namespace {

struct ConfigArgs {
  std::string file;
  std::vector<std::string> overrides;
  bool no_language = false;
  bool no_rectify = false;
  bool decoupled = false;

  void attach(CLI::App* app, bool ablation_flags) {
    app->add_option("--config", file, "Config file (JSON or key=value lines)");
    app->add_option("--set", overrides, "Override a config key, e.g. --set steps=200")->take_all();
    if (ablation_flags) {
      app->add_flag("--no-language", no_language, "Vision-only prototypes, no rectify branch");
      app->add_flag("--no-rectify", no_rectify, "Drop the rectification loss");
      app->add_flag("--decoupled-attention", decoupled, "Separate attention layers for vision and language");
    }
  }

  RunConfig resolve(const nlohmann::json* fallback = nullptr) const {
    RunConfig c;
    if (!file.empty())
      c = load_run_config(file);
    else if (fallback)
      c = RunConfig::from_json(*fallback);
    for (const auto& kv : overrides) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw ValidationError("--set expects key=value, got '" + kv + "'");
      c.set(kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (no_language) c.language = false;
    if (no_rectify) c.rectify = false;
    if (decoupled) c.decoupled_attention = true;
    c.validate();
    return c;
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-modal few-shot detection toolkit"};
  app.require_subcommand(1);

  ConfigArgs train_args;
  std::string out_dir = "run";
  auto* train_cmd = app.add_subcommand("train", "Episodic training; writes checkpoint.bin, metrics.ndjson, eval.json");
  train_args.attach(train_cmd, true);
  train_cmd->add_option("--out", out_dir, "Output directory");

  ConfigArgs eval_args;
  std::string checkpoint_path, detections_path;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on held-out episodes");
  eval_args.attach(eval_cmd, true);
  eval_cmd->add_option("--checkpoint", checkpoint_path, "Checkpoint file")->required();
  eval_cmd->add_option("--detections", detections_path, "Write detections as JSON lines");

  std::string module;
  std::uint64_t grad_seed = 0;
  int grad_instances = 1;
  auto* grad_cmd = app.add_subcommand("gradcheck", "Finite-difference gradient check");
  grad_cmd->add_option("--module", module, "One of the module names or 'all'")->required();
  grad_cmd->add_option("--seed", grad_seed, "Instance seed");
  grad_cmd->add_option("--instances", grad_instances, "Random instances per module");

  auto* corpus_cmd = app.add_subcommand("corpus", "Rich-text corpus tools");
  corpus_cmd->require_subcommand(1);
  std::string corpus_path;
  auto* validate_cmd = corpus_cmd->add_subcommand("validate", "Schema, invariant and length report");
  validate_cmd->add_option("path", corpus_path, "Corpus JSON (default: data root)");

  auto* episode_cmd = app.add_subcommand("episode", "Episode tools");
  episode_cmd->require_subcommand(1);
  ConfigArgs episode_args;
  std::uint64_t episode_seed = 0;
  std::string episode_pool = "base";
  auto* sample_cmd = episode_cmd->add_subcommand("sample", "Dump one sampled episode as JSON");
  episode_args.attach(sample_cmd, false);
  sample_cmd->add_option("--seed", episode_seed, "Episode seed");
  sample_cmd->add_option("--pool", episode_pool, "base or novel")->check(CLI::IsMember({"base", "novel"}));

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train_cmd) {
      const RunConfig config = train_args.resolve();
      fs::create_directories(out_dir);
      std::ofstream metrics(fs::path(out_dir) / "metrics.ndjson");
      const TrainResult result = train(config, &metrics);
      result.checkpoint.save(fs::path(out_dir) / "checkpoint.bin");
      std::ofstream(fs::path(out_dir) / "eval.json") << result.final_eval.to_json().dump(2) << '\n';
      std::cout << result.final_eval.to_json().dump() << '\n';
      return 0;
    }
    if (*eval_cmd) {
      const Checkpoint ck = Checkpoint::load(checkpoint_path);
      const RunConfig config = eval_args.resolve(&ck.config);
      std::ofstream detections;
      if (!detections_path.empty()) detections.open(detections_path);
      const EvalReport report = evaluate(ck, config, detections_path.empty() ? nullptr : &detections);
      std::cout << report.to_json().dump(2) << '\n';
      return 0;
    }
    if (*grad_cmd) {
      std::vector<std::string> modules = module == "all" ? gradcheck_modules() : std::vector<std::string>{module};
      bool ok = true;
      for (const auto& m : modules) {
        GradcheckReport worst;
        for (int i = 0; i < grad_instances; ++i) {
          GradcheckReport r = gradcheck(m, grad_seed + static_cast<std::uint64_t>(i));
          if (i == 0 || r.max_relative_error > worst.max_relative_error) worst = r;
        }
        ok = ok && worst.passed;
        std::cout << m << " max_rel_err=" << worst.max_relative_error << " entries=" << worst.entries << ' '
                  << (worst.passed ? "PASS" : "FAIL") << '\n';
      }
      return ok ? 0 : 1;
    }
    if (*validate_cmd) {
      const fs::path path = corpus_path.empty() ? data_root() / "richtext_corpus.json" : fs::path(corpus_path);
      const CorpusReport report = corpus_validate(path);
      std::cout << report.to_json().dump(2) << '\n';
      std::cout << report.errors.size() << " error(s)\n";
      return report.errors.empty() ? 0 : 1;
    }
    if (*sample_cmd) {
      const RunConfig config = episode_args.resolve();
      const TrainingData data = load_training_data(config);
      const auto& pool = episode_pool == "novel" ? data.split.novel : data.split.base;
      const Episode ep = sample_episode(data.catalog, data.corpus, pool, config.ways, config.shots, config.strategy,
                                        config.text_variant, episode_seed);
      std::cout << episode_to_json(ep, data.catalog).dump(2) << '\n';
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
