#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace mmfsod {

enum class TextVariant { manual, extended, llm };

std::string to_string(TextVariant v);
TextVariant parse_text_variant(std::string_view s);

struct RichTextEntry {
  std::string dataset_id;
  std::string category_name;
  TextVariant variant = TextVariant::manual;
  std::string text;

  bool operator==(const RichTextEntry&) const = default;
};

// Entries in file order. Immutable once loaded.
using Corpus = std::vector<RichTextEntry>;

// Throws ParseError (with line number) for malformed JSON or schema violations
// and ValidationError for duplicate keys or empty/non-alphabetic texts. With
// `check` false only the schema is enforced.
Corpus load_corpus(const std::filesystem::path& path, bool check = true);
Corpus parse_corpus(std::string_view json_text, bool check = true);
std::string serialize_corpus(const Corpus& corpus);
void save_corpus(const Corpus& corpus, const std::filesystem::path& path);

// Checks the entry invariants; throws ValidationError naming the first offender.
void validate_corpus(const Corpus& corpus);
// Same checks, collecting every problem instead of throwing.
std::vector<std::string> corpus_problems(const Corpus& corpus);

const RichTextEntry* find_entry(const Corpus& corpus, std::string_view dataset, std::string_view category,
                                TextVariant variant);

// Lower-cases and splits on Unicode whitespace and punctuation; punctuation is dropped.
std::vector<std::string> normalize_tokens(std::string_view text);

class Vocabulary {
 public:
  static constexpr int kBos = 0;
  static constexpr int kEos = 1;
  static constexpr int kUnk = 2;
  static constexpr int kPad = 3;
  static constexpr int kReserved = 4;

  Vocabulary();

  int size() const { return static_cast<int>(tokens_.size()); }
  std::optional<int> find(const std::string& token) const;
  // Id of the token, or kUnk.
  int lookup(const std::string& token) const;
  const std::string& token(int id) const;

  // Appends a new token with the next dense id; existing tokens keep their id.
  int add(const std::string& token);

 private:
  std::vector<std::string> tokens_;
  std::map<std::string, int> ids_;
};

// Tokens occurring at least min_count times get ids from 4 upward, most frequent
// first, ties broken lexicographically.
Vocabulary build_vocabulary(const Corpus& corpus, int min_count = 1);
Vocabulary build_vocabulary(const std::vector<std::string>& texts, int min_count = 1);

struct TokenSequence {
  std::vector<int> ids;

  std::size_t length() const { return ids.size(); }
  bool operator==(const TokenSequence&) const = default;
};

// [BOS] + ids of the normalized tokens (UNK for out-of-vocabulary) + [EOS].
TokenSequence tokenize(std::string_view text, const Vocabulary& vocab);

// Throws std::invalid_argument when the BOS/EOS framing or id range is broken.
void check_sequence(const TokenSequence& seq, int vocab_size);

}  // namespace mmfsod
