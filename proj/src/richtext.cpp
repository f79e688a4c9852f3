#include "mmfsod/richtext.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>
#include <tuple>

#include <nlohmann/json.hpp>

#include "mmfsod/errors.hpp"

namespace mmfsod {

using nlohmann::json;

std::string to_string(TextVariant v) {
  switch (v) {
    case TextVariant::manual:
      return "manual";
    case TextVariant::extended:
      return "extended";
    case TextVariant::llm:
      return "llm";
  }
  return "?";
}

TextVariant parse_text_variant(std::string_view s) {
  if (s == "manual") return TextVariant::manual;
  if (s == "extended") return TextVariant::extended;
  if (s == "llm") return TextVariant::llm;
  throw std::invalid_argument("unknown text variant '" + std::string(s) + "'");
}

namespace {

constexpr TextVariant kVariants[] = {TextVariant::manual, TextVariant::extended, TextVariant::llm};

int line_of_offset(std::string_view text, std::size_t offset) {
  offset = std::min(offset, text.size());
  return 1 + static_cast<int>(std::count(text.begin(), text.begin() + static_cast<std::ptrdiff_t>(offset), '\n'));
}

const json& require_field(const json& obj, const char* key, const std::string& where) {
  if (!obj.is_object() || !obj.contains(key)) throw ParseError(where + ": missing field '" + key + "'");
  return obj.at(key);
}

std::string entry_key(const RichTextEntry& e) {
  return "(" + e.dataset_id + ", " + e.category_name + ", " + to_string(e.variant) + ")";
}

// Decodes one UTF-8 code point starting at i; malformed bytes decode as U+FFFD.
char32_t next_code_point(std::string_view s, std::size_t& i) {
  const auto b0 = static_cast<unsigned char>(s[i]);
  auto cont = [&](std::size_t k) -> int {
    if (i + k >= s.size()) return -1;
    const auto b = static_cast<unsigned char>(s[i + k]);
    return (b & 0xC0) == 0x80 ? (b & 0x3F) : -1;
  };
  if (b0 < 0x80) {
    i += 1;
    return b0;
  }
  int n = 0;
  char32_t cp = 0;
  if ((b0 & 0xE0) == 0xC0) {
    n = 1;
    cp = b0 & 0x1F;
  } else if ((b0 & 0xF0) == 0xE0) {
    n = 2;
    cp = b0 & 0x0F;
  } else if ((b0 & 0xF8) == 0xF0) {
    n = 3;
    cp = b0 & 0x07;
  } else {
    i += 1;
    return 0xFFFD;
  }
  for (int k = 1; k <= n; ++k) {
    const int c = cont(static_cast<std::size_t>(k));
    if (c < 0) {
      i += 1;
      return 0xFFFD;
    }
    cp = (cp << 6) | static_cast<char32_t>(c);
  }
  i += static_cast<std::size_t>(n) + 1;
  return cp;
}

void append_utf8(std::string& out, char32_t cp) {
  if (cp < 0x80) {
    out.push_back(static_cast<char>(cp));
  } else if (cp < 0x800) {
    out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else if (cp < 0x10000) {
    out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else {
    out.push_back(static_cast<char>(0xF0 | (cp >> 18)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  }
}

bool is_space(char32_t c) {
  return c == ' ' || (c >= 0x09 && c <= 0x0D) || c == 0x85 || c == 0xA0 || c == 0x1680 || (c >= 0x2000 && c <= 0x200A) ||
         c == 0x2028 || c == 0x2029 || c == 0x202F || c == 0x205F || c == 0x3000;
}

bool is_punct(char32_t c) {
  if (c < 0x80) return (c >= 0x21 && c <= 0x2F) || (c >= 0x3A && c <= 0x40) || (c >= 0x5B && c <= 0x60) ||
                       (c >= 0x7B && c <= 0x7E);
  return c == 0xA1 || c == 0xA7 || c == 0xAB || c == 0xB6 || c == 0xB7 || c == 0xBB || c == 0xBF ||
         (c >= 0x2010 && c <= 0x2027) || (c >= 0x2030 && c <= 0x205E) || (c >= 0x3001 && c <= 0x3003) ||
         (c >= 0x3008 && c <= 0x3011) || c == 0xFFFD;
}

char32_t to_lower(char32_t c) {
  if (c >= 'A' && c <= 'Z') return c + 32;
  if ((c >= 0xC0 && c <= 0xDE) && c != 0xD7) return c + 32;  // Latin-1 capitals
  return c;
}

bool has_alpha(const std::string& token) {
  return std::any_of(token.begin(), token.end(), [](char ch) {
    const auto u = static_cast<unsigned char>(ch);
    return (u >= 'a' && u <= 'z') || u >= 0x80;
  });
}

}  // namespace

std::vector<std::string> normalize_tokens(std::string_view text) {
  std::vector<std::string> tokens;
  std::string cur;
  std::size_t i = 0;
  while (i < text.size()) {
    const char32_t cp = next_code_point(text, i);
    if (is_space(cp) || is_punct(cp)) {
      if (!cur.empty()) tokens.push_back(std::move(cur));
      cur.clear();
      continue;
    }
    append_utf8(cur, to_lower(cp));
  }
  if (!cur.empty()) tokens.push_back(std::move(cur));
  return tokens;
}

std::vector<std::string> corpus_problems(const Corpus& corpus) {
  std::vector<std::string> problems;
  std::set<std::tuple<std::string, std::string, TextVariant>> seen;
  for (const auto& e : corpus) {
    if (!seen.emplace(e.dataset_id, e.category_name, e.variant).second)
      problems.push_back("duplicate entry " + entry_key(e));
    if (e.text.empty()) {
      problems.push_back("empty text for " + entry_key(e));
      continue;
    }
    const auto toks = normalize_tokens(e.text);
    if (std::none_of(toks.begin(), toks.end(), has_alpha))
      problems.push_back("text without an alphabetic token for " + entry_key(e));
  }
  return problems;
}

void validate_corpus(const Corpus& corpus) {
  const auto problems = corpus_problems(corpus);
  if (!problems.empty()) throw ValidationError(problems.front());
}

Corpus parse_corpus(std::string_view json_text, bool check) {
  json doc;
  try {
    doc = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ParseError("corpus: malformed JSON at line " + std::to_string(line_of_offset(json_text, e.byte)) + ": " +
                     e.what());
  }
  Corpus corpus;
  const json& datasets = require_field(doc, "datasets", "corpus");
  if (!datasets.is_array()) throw ParseError("corpus: 'datasets' must be an array");
  for (const auto& ds : datasets) {
    const json& id = require_field(ds, "id", "dataset");
    if (!id.is_string()) throw ParseError("dataset: 'id' must be a string");
    const std::string ds_id = id.get<std::string>();
    const json& cats = require_field(ds, "categories", "dataset " + ds_id);
    if (!cats.is_array()) throw ParseError("dataset " + ds_id + ": 'categories' must be an array");
    for (const auto& cat : cats) {
      const json& name = require_field(cat, "name", "category in " + ds_id);
      if (!name.is_string()) throw ParseError("category in " + ds_id + ": 'name' must be a string");
      const std::string cat_name = name.get<std::string>();
      const std::string where = ds_id + "/" + cat_name;
      const json& texts = require_field(cat, "texts", where);
      if (!texts.is_object()) throw ParseError(where + ": 'texts' must be an object");
      for (TextVariant v : kVariants) {
        const std::string key = to_string(v);
        if (!texts.contains(key) || texts.at(key).is_null()) {
          if (v == TextVariant::manual) throw ParseError(where + ": 'manual' text is required");
          continue;
        }
        if (!texts.at(key).is_string()) throw ParseError(where + ": '" + key + "' must be a string or null");
        corpus.push_back(RichTextEntry{ds_id, cat_name, v, texts.at(key).get<std::string>()});
      }
    }
  }
  if (check) validate_corpus(corpus);
  return corpus;
}

Corpus load_corpus(const std::filesystem::path& path, bool check) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("corpus: cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_corpus(ss.str(), check);
}

std::string serialize_corpus(const Corpus& corpus) {
  // Group by dataset then category, both in order of first appearance.
  json datasets = json::array();
  std::vector<std::string> ds_order;
  std::map<std::string, std::vector<std::string>> cat_order;
  std::map<std::pair<std::string, std::string>, json> texts;
  for (const auto& e : corpus) {
    if (std::find(ds_order.begin(), ds_order.end(), e.dataset_id) == ds_order.end()) ds_order.push_back(e.dataset_id);
    auto& cats = cat_order[e.dataset_id];
    if (std::find(cats.begin(), cats.end(), e.category_name) == cats.end()) cats.push_back(e.category_name);
    auto& t = texts[{e.dataset_id, e.category_name}];
    if (t.is_null()) t = json{{"manual", nullptr}, {"extended", nullptr}, {"llm", nullptr}};
    t[to_string(e.variant)] = e.text;
  }
  for (const auto& ds : ds_order) {
    json cats = json::array();
    for (const auto& c : cat_order[ds]) cats.push_back(json{{"name", c}, {"texts", texts[{ds, c}]}});
    datasets.push_back(json{{"id", ds}, {"categories", cats}});
  }
  return json{{"datasets", datasets}}.dump(2) + "\n";
}

void save_corpus(const Corpus& corpus, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << serialize_corpus(corpus);
}

const RichTextEntry* find_entry(const Corpus& corpus, std::string_view dataset, std::string_view category,
                                TextVariant variant) {
  for (const auto& e : corpus)
    if (e.dataset_id == dataset && e.category_name == category && e.variant == variant) return &e;
  return nullptr;
}

Vocabulary::Vocabulary() : tokens_{"<s>", "</s>", "<unk>", "<pad>"} {
  for (std::size_t i = 0; i < tokens_.size(); ++i) ids_.emplace(tokens_[i], static_cast<int>(i));
}

std::optional<int> Vocabulary::find(const std::string& token) const {
  auto it = ids_.find(token);
  if (it == ids_.end()) return std::nullopt;
  return it->second;
}

int Vocabulary::lookup(const std::string& token) const { return find(token).value_or(kUnk); }

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || id >= size()) throw std::out_of_range("Vocabulary::token: id " + std::to_string(id));
  return tokens_[static_cast<std::size_t>(id)];
}

int Vocabulary::add(const std::string& token) {
  if (auto id = find(token)) return *id;
  const int id = size();
  tokens_.push_back(token);
  ids_.emplace(token, id);
  return id;
}

Vocabulary build_vocabulary(const std::vector<std::string>& texts, int min_count) {
  if (min_count < 1) throw std::invalid_argument("build_vocabulary: min_count must be >= 1");
  std::map<std::string, int> counts;
  for (const auto& t : texts)
    for (auto& tok : normalize_tokens(t)) ++counts[tok];
  std::vector<std::pair<std::string, int>> kept;
  for (const auto& [tok, n] : counts)
    if (n >= min_count) kept.emplace_back(tok, n);
  std::stable_sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  Vocabulary vocab;
  for (const auto& [tok, n] : kept) vocab.add(tok);
  return vocab;
}

Vocabulary build_vocabulary(const Corpus& corpus, int min_count) {
  std::vector<std::string> texts;
  texts.reserve(corpus.size());
  for (const auto& e : corpus) texts.push_back(e.text);
  return build_vocabulary(texts, min_count);
}

TokenSequence tokenize(std::string_view text, const Vocabulary& vocab) {
  TokenSequence seq;
  seq.ids.push_back(Vocabulary::kBos);
  for (const auto& tok : normalize_tokens(text)) seq.ids.push_back(vocab.lookup(tok));
  seq.ids.push_back(Vocabulary::kEos);
  return seq;
}

void check_sequence(const TokenSequence& seq, int vocab_size) {
  const auto m = seq.ids.size();
  if (m < 2) throw std::invalid_argument("token sequence shorter than 2");
  if (seq.ids.front() != Vocabulary::kBos || seq.ids.back() != Vocabulary::kEos)
    throw std::invalid_argument("token sequence must start with BOS and end with EOS");
  for (std::size_t j = 0; j < m; ++j) {
    const int id = seq.ids[j];
    if (id < 0 || id >= vocab_size)
      throw std::out_of_range("token id " + std::to_string(id) + " outside vocabulary of size " +
                              std::to_string(vocab_size));
    if (j > 0 && j + 1 < m && (id == Vocabulary::kBos || id == Vocabulary::kEos))
      throw std::invalid_argument("BOS/EOS in interior position " + std::to_string(j));
  }
}

}  // namespace mmfsod
