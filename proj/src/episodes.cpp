#include "mmfsod/episodes.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "mmfsod/errors.hpp"

namespace mmfsod {

using nlohmann::json;

std::string to_string(SamplingStrategy s) {
  return s == SamplingStrategy::balanced_instances ? "balanced_instances" : "unbalanced_images";
}

std::string to_string(TextChoice t) {
  switch (t) {
    case TextChoice::none: return "none";
    case TextChoice::category_name: return "category_name";
    case TextChoice::manual: return "manual";
    case TextChoice::extended: return "extended";
    case TextChoice::llm: return "llm";
  }
  return "manual";
}

std::string to_string(Separability s) {
  return s == Separability::vision_separable ? "vision_separable" : "text_only_separable";
}

SamplingStrategy parse_sampling_strategy(std::string_view s) {
  if (s == "balanced_instances" || s == "balanced") return SamplingStrategy::balanced_instances;
  if (s == "unbalanced_images" || s == "unbalanced") return SamplingStrategy::unbalanced_images;
  throw ValidationError("unknown sampling strategy '" + std::string(s) + "'");
}

TextChoice parse_text_choice(std::string_view s) {
  for (auto t : {TextChoice::none, TextChoice::category_name, TextChoice::manual, TextChoice::extended,
                 TextChoice::llm})
    if (s == to_string(t)) return t;
  throw ValidationError("unknown text variant '" + std::string(s) + "'");
}

Separability parse_separability(std::string_view s) {
  if (s == "vision_separable") return Separability::vision_separable;
  if (s == "text_only_separable") return Separability::text_only_separable;
  throw ValidationError("unknown separability '" + std::string(s) + "'");
}

int CategoryCatalog::category_index(const std::string& name) const {
  auto it = std::find(categories.begin(), categories.end(), name);
  if (it == categories.end()) throw ValidationError("unknown category '" + name + "' in catalog '" + dataset_id + "'");
  return static_cast<int>(it - categories.begin());
}

std::vector<int> CategoryCatalog::images_of(int category) const {
  std::vector<int> out;
  for (std::size_t s = 0; s < samples.size(); ++s)
    if (std::find(samples[s].labels.begin(), samples[s].labels.end(), category) != samples[s].labels.end())
      out.push_back(static_cast<int>(s));
  return out;
}

int CategoryCatalog::instance_count(int category) const {
  int n = 0;
  for (const auto& s : samples) n += static_cast<int>(std::count(s.labels.begin(), s.labels.end(), category));
  return n;
}

void CategoryCatalog::validate() const {
  std::set<std::string> seen;
  for (const auto& c : categories)
    if (!seen.insert(c).second) throw ValidationError("catalog lists category '" + c + "' twice");
  for (std::size_t s = 0; s < samples.size(); ++s) {
    const auto& smp = samples[s];
    if (smp.boxes.size() != smp.labels.size())
      throw ValidationError("sample " + std::to_string(s) + ": boxes and labels differ in length");
    for (std::size_t b = 0; b < smp.boxes.size(); ++b) {
      try {
        check_box(smp.boxes[b]);
      } catch (const std::invalid_argument& e) {
        throw ValidationError("sample " + std::to_string(s) + " box " + std::to_string(b) + ": " + e.what());
      }
      if (smp.labels[b] < 0 || smp.labels[b] >= static_cast<int>(categories.size()))
        throw ValidationError("sample " + std::to_string(s) + ": label " + std::to_string(smp.labels[b]) +
                              " out of range");
    }
  }
  if (world && world->object_directions.rows() != static_cast<Eigen::Index>(categories.size()))
    throw ValidationError("synthetic world does not match the category list");
}

CategorySplit split_base_novel(const CategoryCatalog& catalog, const SplitSpec& spec) {
  CategorySplit out;
  std::set<int> base;
  for (const auto& name : spec.base) {
    const int c = catalog.category_index(name);
    if (base.insert(c).second) out.base.push_back(c);
  }
  std::set<int> novel;
  for (const auto& name : spec.novel) {
    const int c = catalog.category_index(name);
    if (base.count(c)) throw ValidationError("category '" + name + "' is listed as both base and novel");
    if (novel.insert(c).second) out.novel.push_back(c);
  }
  return out;
}

EpisodeText category_text(const CategoryCatalog& catalog, const Corpus& corpus, int category, TextChoice choice) {
  const std::string& name = catalog.categories.at(static_cast<std::size_t>(category));
  switch (choice) {
    case TextChoice::none: return {choice, ""};
    case TextChoice::category_name: return {choice, name};
    default: break;
  }
  const TextVariant variant = choice == TextChoice::manual     ? TextVariant::manual
                              : choice == TextChoice::extended ? TextVariant::extended
                                                               : TextVariant::llm;
  const RichTextEntry* e = find_entry(corpus, catalog.dataset_id, name, variant);
  if (!e && variant == TextVariant::extended) e = find_entry(corpus, catalog.dataset_id, name, TextVariant::manual);
  if (!e)
    throw ValidationError("no " + to_string(variant) + " text for category '" + name + "' in dataset '" +
                          catalog.dataset_id + "'");
  return {choice, e->text};
}

Vocabulary catalog_vocabulary(const CategoryCatalog& catalog, const Corpus& corpus) {
  std::vector<std::string> texts;
  for (const auto& e : corpus)
    if (e.dataset_id == catalog.dataset_id) texts.push_back(e.text);
  for (const auto& c : catalog.categories) texts.push_back(c);
  return build_vocabulary(texts, 1);
}

Episode sample_episode(const CategoryCatalog& catalog, const Corpus& corpus, const std::vector<int>& pool, int n,
                       int k, SamplingStrategy strategy, TextChoice text, std::uint64_t seed,
                       const EpisodeOptions& options) {
  if (n < 1 || k < 1) throw std::invalid_argument("sample_episode: n and k must be positive");
  std::vector<int> candidates(pool);
  std::sort(candidates.begin(), candidates.end());
  candidates.erase(std::unique(candidates.begin(), candidates.end()), candidates.end());
  if (static_cast<int>(candidates.size()) < n)
    throw ValidationError("sample_episode: pool has " + std::to_string(candidates.size()) + " categories, need " +
                          std::to_string(n));
  for (int c : candidates)
    if (c < 0 || c >= static_cast<int>(catalog.categories.size()))
      throw ValidationError("sample_episode: category index " + std::to_string(c) + " not in catalog");

  SeededStream rng(seed, 0xE915);
  rng.shuffle(candidates.begin(), candidates.end());
  candidates.resize(static_cast<std::size_t>(n));

  Episode ep;
  ep.seed = seed;
  ep.strategy = strategy;
  std::set<int> support_images;
  for (int c : candidates) {
    SupportCategory sc;
    sc.category = c;
    const std::string& name = catalog.categories[static_cast<std::size_t>(c)];
    std::vector<int> images = catalog.images_of(c);
    if (strategy == SamplingStrategy::balanced_instances) {
      std::vector<SupportInstance> all;
      for (int s : images) {
        const auto& smp = catalog.samples[static_cast<std::size_t>(s)];
        for (std::size_t b = 0; b < smp.boxes.size(); ++b)
          if (smp.labels[b] == c) all.push_back({s, static_cast<int>(b), smp.boxes[b]});
      }
      if (static_cast<int>(all.size()) < k)
        throw ValidationError("category '" + name + "' has " + std::to_string(all.size()) + " instances, need " +
                              std::to_string(k));
      rng.shuffle(all.begin(), all.end());
      sc.instances.assign(all.begin(), all.begin() + k);
    } else {
      if (static_cast<int>(images.size()) < k)
        throw ValidationError("category '" + name + "' has " + std::to_string(images.size()) + " images, need " +
                              std::to_string(k));
      rng.shuffle(images.begin(), images.end());
      for (int i = 0; i < k; ++i) {
        const int s = images[static_cast<std::size_t>(i)];
        const auto& smp = catalog.samples[static_cast<std::size_t>(s)];
        for (std::size_t b = 0; b < smp.boxes.size(); ++b)
          if (smp.labels[b] == c) sc.instances.push_back({s, static_cast<int>(b), smp.boxes[b]});
      }
    }
    std::set<int> imgs;
    for (const auto& inst : sc.instances) imgs.insert(inst.sample);
    sc.images.assign(imgs.begin(), imgs.end());
    support_images.insert(imgs.begin(), imgs.end());
    sc.text = category_text(catalog, corpus, c, text);
    ep.support.push_back(std::move(sc));
  }

  // Query images: per slot, unused images of that category until the instance quota is met.
  const int quota = options.query_instances > 0 ? options.query_instances : 2 * k;
  std::vector<int> chosen;
  std::set<int> taken(support_images);
  for (int slot = 0; slot < n; ++slot) {
    const int c = candidates[static_cast<std::size_t>(slot)];
    std::vector<int> images = catalog.images_of(c);
    rng.shuffle(images.begin(), images.end());
    int count = 0;
    for (int s : images) {
      if (count >= quota) break;
      if (support_images.count(s)) continue;
      const auto& labels = catalog.samples[static_cast<std::size_t>(s)].labels;
      const int here = static_cast<int>(std::count(labels.begin(), labels.end(), c));
      if (taken.insert(s).second) chosen.push_back(s);
      count += here;
    }
    if (count == 0 && !options.allow_empty_query)
      throw ValidationError("category '" + catalog.categories[static_cast<std::size_t>(c)] +
                            "' has no images left for the query set");
  }
  for (int s : chosen) {
    const auto& smp = catalog.samples[static_cast<std::size_t>(s)];
    QueryImage q;
    q.sample = s;
    for (std::size_t b = 0; b < smp.boxes.size(); ++b) {
      auto it = std::find(candidates.begin(), candidates.end(), smp.labels[b]);
      if (it == candidates.end()) continue;
      q.boxes.push_back(smp.boxes[b]);
      q.labels.push_back(static_cast<int>(it - candidates.begin()));
    }
    ep.query.push_back(std::move(q));
  }
  return ep;
}

namespace {

std::string pseudo_word(SeededStream& rng) {
  static const char* onsets[] = {"b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "tr", "sk", "gl"};
  static const char* vowels[] = {"a", "e", "i", "o", "u", "ai", "ou"};
  const int syllables = 2 + static_cast<int>(rng.below(2));
  std::string w;
  for (int i = 0; i < syllables; ++i) {
    w += onsets[rng.below(std::size(onsets))];
    w += vowels[rng.below(std::size(vowels))];
  }
  if (rng.below(2)) w += "n";
  return w;
}

struct Lexicon {
  std::string name;
  std::vector<std::string> attributes;  // six words
};

std::vector<Lexicon> make_lexicons(int categories, std::uint64_t seed) {
  static const std::set<std::string> reserved = {"with", "and", "it", "is", "often", "found", "near",
                                                 "surroundings", "a", "object", "showing", "features"};
  SeededStream rng(seed, 0x1E7);
  std::set<std::string> used(reserved);
  auto fresh = [&] {
    for (;;) {
      std::string w = pseudo_word(rng);
      if (used.insert(w).second) return w;
    }
  };
  std::vector<Lexicon> out(static_cast<std::size_t>(categories));
  for (auto& lex : out) {
    lex.name = fresh();
    for (int a = 0; a < 6; ++a) lex.attributes.push_back(fresh());
  }
  return out;
}

Corpus lexicon_corpus(const std::string& dataset, const std::vector<Lexicon>& lexicons) {
  Corpus corpus;
  for (const auto& lx : lexicons) {
    const auto& a = lx.attributes;
    const std::string manual = lx.name + " with " + a[0] + " " + a[1] + " and " + a[2] + " " + a[3];
    corpus.push_back({dataset, lx.name, TextVariant::manual, manual});
    corpus.push_back({dataset, lx.name, TextVariant::extended,
                      manual + ". it is often found near " + a[4] + " and " + a[5] + " surroundings"});
    corpus.push_back({dataset, lx.name, TextVariant::llm,
                      "a " + lx.name + " is a " + a[1] + " object showing " + a[0] + " " + a[3] + ", " + a[2] +
                          " and " + a[5] + " " + a[4] + " features"});
  }
  return corpus;
}

Matrix semantic_directions(const std::vector<Lexicon>& lexicons, const Vocabulary& vocab, int dim) {
  Matrix dirs(static_cast<Eigen::Index>(lexicons.size()), dim);
  for (std::size_t c = 0; c < lexicons.size(); ++c) {
    RowVector h = SyntheticBackend::token_vector(vocab.lookup(lexicons[c].name), dim);
    for (const auto& a : lexicons[c].attributes) h += SyntheticBackend::token_vector(vocab.lookup(a), dim);
    dirs.row(static_cast<Eigen::Index>(c)) = h.normalized();
  }
  return dirs;
}

bool boxes_touch(const Box& a, const Box& b, double margin_x, double margin_y) {
  return a.x0 < b.x1 + margin_x && b.x0 < a.x1 + margin_x && a.y0 < b.y1 + margin_y && b.y0 < a.y1 + margin_y;
}

Box random_box(SeededStream& rng) {
  const double w = 0.2 + 0.15 * rng.uniform();
  const double h = 0.2 + 0.15 * rng.uniform();
  const double x0 = (1.0 - w) * rng.uniform();
  const double y0 = (1.0 - h) * rng.uniform();
  return Box{x0, y0, x0 + w, y0 + h};
}

SyntheticWorld build_world(const SyntheticSpec& spec, const std::vector<Lexicon>& lexicons, const Vocabulary& vocab) {
  SyntheticWorld world;
  world.spec = spec;
  const Matrix semantic = semantic_directions(lexicons, vocab, spec.dim);
  if (spec.separability == Separability::vision_separable) {
    world.object_directions = semantic;
    world.scene_directions = Matrix::Zero(semantic.rows(), semantic.cols());
  } else {
    const RowVector shared = hashrng::normal_matrix(spec.seed, 0x5A4ED, 1, spec.dim).row(0).normalized();
    world.object_directions = shared.replicate(semantic.rows(), 1);
    world.scene_directions = semantic;
  }
  return world;
}

}  // namespace

SyntheticDataset generate_synthetic_catalog(const SyntheticSpec& spec) {
  if (spec.n_categories < 2) throw std::invalid_argument("generate_synthetic_catalog: need at least 2 categories");
  if (spec.images_per_category < 1 || spec.height < 1 || spec.width < 1 || spec.dim < 1)
    throw std::invalid_argument("generate_synthetic_catalog: sizes must be positive");
  SyntheticDataset out;
  const auto lexicons = make_lexicons(spec.n_categories, spec.seed);
  out.catalog.dataset_id = "synthetic";
  for (const auto& lx : lexicons) out.catalog.categories.push_back(lx.name);
  out.corpus = lexicon_corpus(out.catalog.dataset_id, lexicons);

  SeededStream rng(spec.seed, 0xB0C5);
  const double mx = 1.0 / spec.width, my = 1.0 / spec.height;
  for (int c = 0; c < spec.n_categories; ++c) {
    for (int i = 0; i < spec.images_per_category; ++i) {
      AnnotatedSample smp;
      smp.image.seed = hashrng::combine(spec.seed, 0x1A6E, out.catalog.samples.size());
      smp.boxes.push_back(random_box(rng));
      smp.labels.push_back(c);
      if (rng.uniform() < 0.3) {
        for (int attempt = 0; attempt < 50; ++attempt) {
          const Box b = random_box(rng);
          if (!boxes_touch(b, smp.boxes.front(), 2 * mx, 2 * my)) {
            smp.boxes.push_back(b);
            smp.labels.push_back(c);
            break;
          }
        }
      }
      out.catalog.samples.push_back(std::move(smp));
    }
  }
  out.catalog.world = build_world(spec, lexicons, catalog_vocabulary(out.catalog, out.corpus));
  out.catalog.validate();
  return out;
}

QueryFeatureMap render_sample(const CategoryCatalog& catalog, const FeatureBackend& backend, int sample, int height,
                              int width, int dim) {
  const auto& smp = catalog.samples.at(static_cast<std::size_t>(sample));
  QueryFeatureMap base = backend.extract_query_features(smp.image, height, width, dim);
  if (!catalog.world || smp.image.tensor_path) return base;
  const SyntheticWorld& w = *catalog.world;
  require_shape(w.object_directions.cols() == dim, "render_sample: world width " +
                                                       std::to_string(w.object_directions.cols()) + " vs d " +
                                                       std::to_string(dim));
  Matrix values = base.values();
  std::vector<bool> near_object(static_cast<std::size_t>(height * width), false);
  for (std::size_t b = 0; b < smp.boxes.size(); ++b) {
    const Box& box = smp.boxes[b];
    const RowVector dir = w.object_directions.row(smp.labels[b]);
    const double sx = 0.5 * box.width(), sy = 0.5 * box.height();
    for (int pos : covered_positions(height, width, box)) {
      const int r = pos / width, c = pos % width;
      const double dx = ((c + 0.5) / width - box.center_x()) / sx;
      const double dy = ((r + 0.5) / height - box.center_y()) / sy;
      const double profile = 0.5 + 0.5 * std::exp(-0.5 * (dx * dx + dy * dy));
      values.row(pos) += w.spec.object_amplitude * profile * dir;
      for (int rr = std::max(0, r - 1); rr <= std::min(height - 1, r + 1); ++rr)
        for (int cc = std::max(0, c - 1); cc <= std::min(width - 1, c + 1); ++cc)
          near_object[static_cast<std::size_t>(rr * width + cc)] = true;
    }
  }
  if (!smp.labels.empty() && w.scene_directions.row(smp.labels.front()).squaredNorm() > 0.0) {
    const RowVector scene = w.spec.scene_amplitude * w.scene_directions.row(smp.labels.front());
    for (int pos = 0; pos < height * width; ++pos)
      if (!near_object[static_cast<std::size_t>(pos)]) values.row(pos) += scene;
  }
  return QueryFeatureMap(height, width, std::move(values));
}

Box background_crop(const CategoryCatalog& catalog, int sample, int height, int width, std::uint64_t seed) {
  const auto& smp = catalog.samples.at(static_cast<std::size_t>(sample));
  const double bw = std::min(1.0, 2.0 / width), bh = std::min(1.0, 2.0 / height);
  SeededStream rng(seed, 0xBAC6);
  auto clear = [&](const Box& b) {
    return std::none_of(smp.boxes.begin(), smp.boxes.end(), [&](const Box& o) { return boxes_touch(b, o, 0, 0); });
  };
  for (int attempt = 0; attempt < 64; ++attempt) {
    const double x0 = (1.0 - bw) * rng.uniform(), y0 = (1.0 - bh) * rng.uniform();
    const Box b{x0, y0, x0 + bw, y0 + bh};
    if (clear(b)) return b;
  }
  // Exhaustive scan over grid-aligned placements.
  for (int r = 0; r + 2 <= height; ++r)
    for (int c = 0; c + 2 <= width; ++c) {
      const Box b{c * 1.0 / width, r * 1.0 / height, c * 1.0 / width + bw, r * 1.0 / height + bh};
      if (clear(b)) return b;
    }
  throw ValidationError("sample " + std::to_string(sample) + " has no object-free region for a background crop");
}

json catalog_to_json(const CategoryCatalog& catalog) {
  json samples = json::array();
  for (const auto& s : catalog.samples) {
    json image;
    if (s.image.tensor_path)
      image = {{"path", s.image.tensor_path->string()}};
    else
      image = {{"seed", s.image.seed}};
    json boxes = json::array();
    for (const auto& b : s.boxes) boxes.push_back({b.x0, b.y0, b.x1, b.y1});
    samples.push_back({{"image", image}, {"boxes", boxes}, {"labels", s.labels}});
  }
  json j{{"dataset_id", catalog.dataset_id}, {"categories", catalog.categories}, {"samples", samples}};
  if (catalog.world) {
    const auto& sp = catalog.world->spec;
    j["synthetic"] = {{"n_categories", sp.n_categories},
                      {"images_per_category", sp.images_per_category},
                      {"height", sp.height},
                      {"width", sp.width},
                      {"dim", sp.dim},
                      {"separability", to_string(sp.separability)},
                      {"seed", sp.seed},
                      {"object_amplitude", sp.object_amplitude},
                      {"scene_amplitude", sp.scene_amplitude}};
  }
  return j;
}

CategoryCatalog catalog_from_json(const json& j) {
  try {
    CategoryCatalog cat;
    cat.dataset_id = j.value("dataset_id", std::string("catalog"));
    cat.categories = j.at("categories").get<std::vector<std::string>>();
    for (const auto& s : j.at("samples")) {
      AnnotatedSample smp;
      const json& image = s.at("image");
      if (image.contains("path"))
        smp.image.tensor_path = image.at("path").get<std::string>();
      else
        smp.image.seed = image.at("seed").get<std::uint64_t>();
      for (const auto& b : s.at("boxes")) {
        if (b.size() != 4) throw ParseError("catalog: box must have 4 coordinates");
        smp.boxes.push_back(Box{b[0].get<double>(), b[1].get<double>(), b[2].get<double>(), b[3].get<double>()});
      }
      smp.labels = s.at("labels").get<std::vector<int>>();
      cat.samples.push_back(std::move(smp));
    }
    if (j.contains("synthetic")) {
      const json& g = j.at("synthetic");
      SyntheticSpec sp;
      sp.n_categories = g.at("n_categories");
      sp.images_per_category = g.at("images_per_category");
      sp.height = g.at("height");
      sp.width = g.at("width");
      sp.dim = g.at("dim");
      sp.separability = parse_separability(g.at("separability").get<std::string>());
      sp.seed = g.at("seed");
      sp.object_amplitude = g.at("object_amplitude");
      sp.scene_amplitude = g.at("scene_amplitude");
      SyntheticDataset regenerated = generate_synthetic_catalog(sp);
      if (regenerated.catalog.categories != cat.categories)
        throw ValidationError("catalog categories disagree with its synthetic generator spec");
      cat.world = std::move(regenerated.catalog.world);
    }
    cat.validate();
    return cat;
  } catch (const json::exception& e) {
    throw ParseError(std::string("catalog: ") + e.what());
  }
}

CategoryCatalog load_catalog(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open catalog " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  json j;
  try {
    j = json::parse(buf.str());
  } catch (const json::parse_error& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
  return catalog_from_json(j);
}

void save_catalog(const CategoryCatalog& catalog, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write catalog " + path.string());
  out << catalog_to_json(catalog).dump(2) << '\n';
}

json episode_to_json(const Episode& episode, const CategoryCatalog& catalog) {
  json support = json::array();
  for (const auto& sc : episode.support) {
    json inst = json::array();
    for (const auto& i : sc.instances)
      inst.push_back({{"sample", i.sample}, {"box_index", i.box_index}, {"box", {i.box.x0, i.box.y0, i.box.x1, i.box.y1}}});
    support.push_back({{"category", catalog.categories[static_cast<std::size_t>(sc.category)]},
                       {"instances", inst},
                       {"images", sc.images},
                       {"text", {{"variant", to_string(sc.text.choice)}, {"text", sc.text.text}}}});
  }
  json query = json::array();
  for (const auto& q : episode.query) {
    json boxes = json::array();
    for (const auto& b : q.boxes) boxes.push_back({b.x0, b.y0, b.x1, b.y1});
    query.push_back({{"sample", q.sample}, {"boxes", boxes}, {"labels", q.labels}});
  }
  return json{{"seed", episode.seed},
              {"strategy", to_string(episode.strategy)},
              {"support", support},
              {"query", query}};
}

}  // namespace mmfsod
