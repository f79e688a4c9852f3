#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "mmfsod/backends.hpp"
#include "mmfsod/richtext.hpp"

namespace mmfsod {

enum class SamplingStrategy { balanced_instances, unbalanced_images };
enum class TextChoice { none, category_name, manual, extended, llm };
enum class Separability { vision_separable, text_only_separable };

std::string to_string(SamplingStrategy s);
std::string to_string(TextChoice t);
std::string to_string(Separability s);
SamplingStrategy parse_sampling_strategy(std::string_view s);
TextChoice parse_text_choice(std::string_view s);
Separability parse_separability(std::string_view s);

struct AnnotatedSample {
  ImageRef image;
  std::vector<Box> boxes;
  std::vector<int> labels;  // catalog category indices
};

struct SyntheticSpec {
  int n_categories = 4;
  int images_per_category = 20;
  int height = 8;
  int width = 8;
  int dim = 32;
  Separability separability = Separability::vision_separable;
  std::uint64_t seed = 0;
  double object_amplitude = 3.0;
  double scene_amplitude = 2.0;
};

// Signal added on top of the backend's noise floor when rendering a synthetic image.
struct SyntheticWorld {
  SyntheticSpec spec;
  Matrix object_directions;  // categories x d, unit rows
  Matrix scene_directions;   // categories x d, zero rows when the world has no scene signal
};

struct CategoryCatalog {
  std::string dataset_id;
  std::vector<std::string> categories;
  std::vector<AnnotatedSample> samples;
  std::optional<SyntheticWorld> world;

  int category_index(const std::string& name) const;  // throws ValidationError
  // Sample indices holding at least one instance of the category, ascending.
  std::vector<int> images_of(int category) const;
  int instance_count(int category) const;
  void validate() const;
};

struct SplitSpec {
  std::vector<std::string> base;
  std::vector<std::string> novel;
};

struct CategorySplit {
  std::vector<int> base;
  std::vector<int> novel;
};

// Throws ValidationError when a name is unknown or listed in both sets.
CategorySplit split_base_novel(const CategoryCatalog& catalog, const SplitSpec& spec);

struct SupportInstance {
  int sample = 0;
  int box_index = 0;
  Box box;
};

struct EpisodeText {
  TextChoice choice = TextChoice::manual;
  std::string text;
};

struct SupportCategory {
  int category = 0;  // catalog index
  std::vector<SupportInstance> instances;
  std::vector<int> images;  // distinct samples the instances come from, ascending
  EpisodeText text;
};

struct QueryImage {
  int sample = 0;
  std::vector<Box> boxes;
  std::vector<int> labels;  // episode slots in [0, n)
};

// Support slots follow the sampled category order; query labels refer to those slots.
struct Episode {
  std::vector<SupportCategory> support;
  std::vector<QueryImage> query;
  std::uint64_t seed = 0;
  SamplingStrategy strategy = SamplingStrategy::balanced_instances;

  int ways() const { return static_cast<int>(support.size()); }
};

struct EpisodeOptions {
  // Instances per category in the query set; 0 means 2k.
  int query_instances = 0;
  bool allow_empty_query = false;
};

// Draws n categories from `pool` (catalog indices) and k support instances or
// images per category. Query images never overlap support images. Throws
// ValidationError naming the category when it lacks data.
Episode sample_episode(const CategoryCatalog& catalog, const Corpus& corpus, const std::vector<int>& pool, int n,
                       int k, SamplingStrategy strategy, TextChoice text, std::uint64_t seed,
                       const EpisodeOptions& options = {});

// The text attached for one category; extended falls back to manual when absent.
EpisodeText category_text(const CategoryCatalog& catalog, const Corpus& corpus, int category, TextChoice choice);

// Vocabulary over the catalog's corpus texts plus its category names.
Vocabulary catalog_vocabulary(const CategoryCatalog& catalog, const Corpus& corpus);

struct SyntheticDataset {
  CategoryCatalog catalog;
  Corpus corpus;
};

// Gaussian object blobs over an N(0, 1) noise floor. vision_separable: each
// category's blob points along its own semantic direction. text_only_separable:
// every blob points along one shared direction, and the semantic direction only
// appears in the scene around objects, so instance crops carry no category signal.
// The semantic direction of a category is the normalized sum of the synthetic
// token vectors of its name and attribute words.
SyntheticDataset generate_synthetic_catalog(const SyntheticSpec& spec);

// Feature map of one catalog sample: backend features plus the world's signal.
QueryFeatureMap render_sample(const CategoryCatalog& catalog, const FeatureBackend& backend, int sample, int height,
                              int width, int dim);

// A box of about 2 x 2 cells that touches no annotated object.
Box background_crop(const CategoryCatalog& catalog, int sample, int height, int width, std::uint64_t seed);

nlohmann::json catalog_to_json(const CategoryCatalog& catalog);
// Synthetic catalogs store their generator spec and rebuild the world on load.
CategoryCatalog catalog_from_json(const nlohmann::json& j);
CategoryCatalog load_catalog(const std::filesystem::path& path);
void save_catalog(const CategoryCatalog& catalog, const std::filesystem::path& path);

nlohmann::json episode_to_json(const Episode& episode, const CategoryCatalog& catalog);

}  // namespace mmfsod
