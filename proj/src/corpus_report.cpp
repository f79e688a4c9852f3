#include <algorithm>

#include "mmfsod/harness.hpp"

namespace mmfsod {

using nlohmann::json;

json CorpusReport::to_json() const {
  json stats = json::object();
  for (const auto& [ds, variants] : lengths)
    for (const auto& [variant, s] : variants)
      stats[ds][variant] = {{"count", s.count}, {"mean_tokens", s.mean_tokens}, {"min_tokens", s.min_tokens},
                            {"max_tokens", s.max_tokens}};
  return json{{"errors", errors}, {"lengths", stats}, {"notes", notes}};
}

CorpusReport corpus_validate(const std::filesystem::path& path) {
  CorpusReport report;
  Corpus corpus;
  try {
    corpus = load_corpus(path, false);
  } catch (const std::exception& e) {
    report.errors.push_back(e.what());
    return report;
  }
  report.errors = corpus_problems(corpus);

  std::map<std::string, std::map<std::string, std::vector<int>>> counts;
  for (const auto& e : corpus)
    counts[e.dataset_id][to_string(e.variant)].push_back(static_cast<int>(normalize_tokens(e.text).size()));
  for (const auto& [ds, variants] : counts)
    for (const auto& [variant, lens] : variants) {
      LengthStats s;
      s.count = static_cast<int>(lens.size());
      s.min_tokens = *std::min_element(lens.begin(), lens.end());
      s.max_tokens = *std::max_element(lens.begin(), lens.end());
      double total = 0;
      for (int l : lens) total += l;
      s.mean_tokens = total / s.count;
      report.lengths[ds][variant] = s;
    }

  // Extended texts are meant to continue the manual description.
  for (const auto& e : corpus) {
    if (e.variant != TextVariant::manual) continue;
    const RichTextEntry* ext = find_entry(corpus, e.dataset_id, e.category_name, TextVariant::extended);
    if (!ext) continue;
    const auto manual = normalize_tokens(e.text);
    const auto extended = normalize_tokens(ext->text);
    const bool prefix = extended.size() >= manual.size() && std::equal(manual.begin(), manual.end(), extended.begin());
    report.notes.push_back(e.dataset_id + "/" + e.category_name + ": extended " +
                           (prefix ? "extends" : "does not extend") + " the manual text (" +
                           std::to_string(manual.size()) + " -> " + std::to_string(extended.size()) + " tokens)");
  }
  return report;
}

}  // namespace mmfsod
