#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <sstream>

#include "mmfsod/harness.hpp"

#ifndef MMFSOD_DEFAULT_DATA_ROOT
#define MMFSOD_DEFAULT_DATA_ROOT "data"
#endif

namespace mmfsod {

using nlohmann::json;

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

long long to_integer(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const long long x = std::stoll(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw ValidationError("config: '" + key + "' expects an integer, got '" + v + "'");
  }
}

double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double x = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw ValidationError("config: '" + key + "' expects a number, got '" + v + "'");
  }
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ValidationError("config: '" + key + "' expects true or false, got '" + v + "'");
}

int to_int(const std::string& key, const std::string& v) { return static_cast<int>(to_integer(key, v)); }

std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

using Setter = std::function<void(RunConfig&, const std::string&, const std::string&)>;

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = {
      {"seed", [](RunConfig& c, const std::string& k, const std::string& v) {
         const long long x = to_integer(k, v);
         if (x < 0) throw ValidationError("config: 'seed' must be non-negative");
         c.seed = static_cast<std::uint64_t>(x);
       }},
      {"d", [](RunConfig& c, const std::string& k, const std::string& v) { c.dim = to_int(k, v); }},
      {"heads", [](RunConfig& c, const std::string& k, const std::string& v) { c.heads = to_int(k, v); }},
      {"n", [](RunConfig& c, const std::string& k, const std::string& v) { c.ways = to_int(k, v); }},
      {"k", [](RunConfig& c, const std::string& k, const std::string& v) { c.shots = to_int(k, v); }},
      {"strategy", [](RunConfig& c, const std::string&, const std::string& v) { c.strategy = parse_sampling_strategy(v); }},
      {"text_variant", [](RunConfig& c, const std::string&, const std::string& v) { c.text_variant = parse_text_choice(v); }},
      {"backend", [](RunConfig& c, const std::string&, const std::string& v) { c.backend = v; }},
      {"lambda", [](RunConfig& c, const std::string& k, const std::string& v) { c.rect_weight = to_double(k, v); }},
      {"normalize", [](RunConfig& c, const std::string& k, const std::string& v) { c.normalize_rect = to_bool(k, v); }},
      {"lr", [](RunConfig& c, const std::string& k, const std::string& v) { c.learning_rate = to_double(k, v); }},
      {"task_lr_scale",
       [](RunConfig& c, const std::string& k, const std::string& v) { c.task_lr_scale = to_double(k, v); }},
      {"batch_size", [](RunConfig& c, const std::string& k, const std::string& v) { c.batch_size = to_int(k, v); }},
      {"steps", [](RunConfig& c, const std::string& k, const std::string& v) { c.steps = to_int(k, v); }},
      {"optimizer", [](RunConfig& c, const std::string&, const std::string& v) { c.optimizer = v; }},
      {"eval_every", [](RunConfig& c, const std::string& k, const std::string& v) { c.eval_every = to_int(k, v); }},
      {"eval_episodes", [](RunConfig& c, const std::string& k, const std::string& v) { c.eval_episodes = to_int(k, v); }},
      {"height", [](RunConfig& c, const std::string& k, const std::string& v) { c.height = to_int(k, v); }},
      {"width", [](RunConfig& c, const std::string& k, const std::string& v) { c.width = to_int(k, v); }},
      {"roi_size", [](RunConfig& c, const std::string& k, const std::string& v) { c.roi_size = to_int(k, v); }},
      {"catalog", [](RunConfig& c, const std::string&, const std::string& v) { c.catalog = v; }},
      {"corpus", [](RunConfig& c, const std::string&, const std::string& v) { c.corpus = v; }},
      {"novel", [](RunConfig& c, const std::string&, const std::string& v) { c.novel = split_list(v); }},
      {"novel_categories", [](RunConfig& c, const std::string& k, const std::string& v) { c.novel_categories = to_int(k, v); }},
      {"base_novel_ratio", [](RunConfig& c, const std::string& k, const std::string& v) { c.base_novel_ratio = to_double(k, v); }},
      {"synthetic_categories", [](RunConfig& c, const std::string& k, const std::string& v) { c.synthetic_categories = to_int(k, v); }},
      {"synthetic_images", [](RunConfig& c, const std::string& k, const std::string& v) { c.synthetic_images = to_int(k, v); }},
      {"separability", [](RunConfig& c, const std::string&, const std::string& v) { c.separability = parse_separability(v); }},
      {"object_amplitude", [](RunConfig& c, const std::string& k, const std::string& v) { c.object_amplitude = to_double(k, v); }},
      {"scene_amplitude", [](RunConfig& c, const std::string& k, const std::string& v) { c.scene_amplitude = to_double(k, v); }},
      {"language", [](RunConfig& c, const std::string& k, const std::string& v) { c.language = to_bool(k, v); }},
      {"rectify", [](RunConfig& c, const std::string& k, const std::string& v) { c.rectify = to_bool(k, v); }},
      {"decoupled_attention", [](RunConfig& c, const std::string& k, const std::string& v) { c.decoupled_attention = to_bool(k, v); }},
  };
  return table;
}

}  // namespace

void RunConfig::set(const std::string& key, const std::string& value) {
  const auto& table = setters();
  auto it = table.find(key);
  if (it == table.end()) throw ValidationError("config: unknown key '" + key + "'");
  it->second(*this, key, trim(value));
}

void RunConfig::validate() const {
  auto positive = [](const char* name, double v) {
    if (!(v > 0)) throw ValidationError(std::string("config: '") + name + "' must be positive");
  };
  positive("d", dim);
  positive("heads", heads);
  positive("n", ways);
  positive("k", shots);
  positive("lr", learning_rate);
  positive("task_lr_scale", task_lr_scale);
  positive("eval_episodes", eval_episodes);
  positive("height", height);
  positive("width", width);
  positive("roi_size", roi_size);
  positive("base_novel_ratio", base_novel_ratio);
  positive("synthetic_images", synthetic_images);
  positive("object_amplitude", object_amplitude);
  if (steps < 0) throw ValidationError("config: 'steps' must be non-negative");
  if (batch_size < 0) throw ValidationError("config: 'batch_size' must be non-negative");
  if (eval_every < 0) throw ValidationError("config: 'eval_every' must be non-negative");
  if (rect_weight < 0) throw ValidationError("config: 'lambda' must be non-negative");
  if (scene_amplitude < 0) throw ValidationError("config: 'scene_amplitude' must be non-negative");
  if (novel_categories < 0) throw ValidationError("config: 'novel_categories' must be non-negative");
  if (synthetic_categories < 2) throw ValidationError("config: 'synthetic_categories' must be at least 2");
  if (dim % 2 != 0) throw ValidationError("config: 'd' must be even");
  if (dim % heads != 0) throw ValidationError("config: 'heads' must divide 'd'");
  if (optimizer != "sgd" && optimizer != "adam") throw ValidationError("config: optimizer must be sgd or adam");
}

json RunConfig::to_json() const {
  return json{{"seed", seed},
              {"d", dim},
              {"heads", heads},
              {"n", ways},
              {"k", shots},
              {"strategy", to_string(strategy)},
              {"text_variant", to_string(text_variant)},
              {"backend", backend},
              {"lambda", rect_weight},
              {"normalize", normalize_rect},
              {"lr", learning_rate},
              {"task_lr_scale", task_lr_scale},
              {"batch_size", batch_size},
              {"steps", steps},
              {"optimizer", optimizer},
              {"eval_every", eval_every},
              {"eval_episodes", eval_episodes},
              {"height", height},
              {"width", width},
              {"roi_size", roi_size},
              {"catalog", catalog},
              {"corpus", corpus},
              {"novel", novel},
              {"novel_categories", novel_categories},
              {"base_novel_ratio", base_novel_ratio},
              {"synthetic_categories", synthetic_categories},
              {"synthetic_images", synthetic_images},
              {"separability", to_string(separability)},
              {"object_amplitude", object_amplitude},
              {"scene_amplitude", scene_amplitude},
              {"language", language},
              {"rectify", rectify},
              {"decoupled_attention", decoupled_attention}};
}

RunConfig RunConfig::from_json(const json& j) {
  if (!j.is_object()) throw ParseError("config: expected a JSON object");
  RunConfig c;
  for (const auto& [key, value] : j.items()) {
    std::string text;
    if (value.is_string()) {
      text = value.get<std::string>();
    } else if (value.is_array()) {
      for (const auto& item : value) text += (text.empty() ? "" : ",") + item.get<std::string>();
    } else {
      text = value.dump();
    }
    c.set(key, text);
  }
  c.validate();
  return c;
}

RunConfig parse_run_config(std::string_view text) {
  const std::string body = trim(text);
  if (!body.empty() && body.front() == '{') {
    try {
      return RunConfig::from_json(json::parse(body));
    } catch (const json::parse_error& e) {
      throw ParseError(std::string("config: ") + e.what());
    }
  }
  RunConfig c;
  std::stringstream ss{std::string(text)};
  std::string line;
  int lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    if (trim(line).empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ParseError("config line " + std::to_string(lineno) + ": expected key = value");
    c.set(trim(line.substr(0, eq)), line.substr(eq + 1));
  }
  c.validate();
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open config " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_run_config(buf.str());
}

std::filesystem::path data_root() {
  if (const char* env = std::getenv("MMFSOD_DATA_ROOT"); env && *env) return env;
  return MMFSOD_DEFAULT_DATA_ROOT;
}

std::filesystem::path resolve_data_path(const std::string& path) {
  std::filesystem::path p(path);
  if (p.is_absolute() || std::filesystem::exists(p)) return p;
  return data_root() / p;
}

}  // namespace mmfsod
