// Data model, word-level tokenization, JSONL dataset I/O and the synthetic
// contrastive dataset generator.
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace mscqg {

using TokenId = int;

inline constexpr TokenId kUnk = 0;
inline constexpr TokenId kSep = 1;
inline constexpr TokenId kEos = 2;
inline constexpr TokenId kPad = 3;
inline constexpr std::size_t kNumSpecials = 4;

class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Lowercased alphanumeric runs; everything else is a boundary and dropped.
std::vector<std::string> normalize_words(std::string_view text);

class Vocabulary {
 public:
  /// Keeps the `max_size - 4` most frequent words, ties broken
  /// lexicographically. Throws on an empty corpus or max_size < 4.
  static Vocabulary build(std::span<const std::string> texts, std::size_t max_size);
  /// Restores a vocabulary from its non-special words in id order.
  static Vocabulary from_words(std::vector<std::string> words);

  [[nodiscard]] TokenId id(std::string_view word) const;
  [[nodiscard]] const std::string& word(TokenId id) const;
  [[nodiscard]] std::size_t size() const { return words_.size(); }
  /// Non-special words in id order (ids 4, 5, ...).
  [[nodiscard]] std::vector<std::string> regular_words() const;

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) { return a.words_ == b.words_; }

 private:
  Vocabulary();
  std::vector<std::string> words_;
  std::unordered_map<std::string, TokenId> index_;
};

std::vector<TokenId> tokenize(std::string_view text, const Vocabulary& vocab);
/// Space-joined words; specials other than UNK are skipped.
std::string detokenize(std::span<const TokenId> ids, const Vocabulary& vocab);

struct Document {
  std::string id;
  std::string text;
  std::vector<TokenId> tokens;  // filled by assign_tokens

  friend bool operator==(const Document& a, const Document& b) { return a.id == b.id && a.text == b.text; }
};

struct ContrastiveInstance {
  std::string id;
  std::vector<Document> positive_docs;
  std::vector<Document> negative_docs;
  std::optional<std::string> oracle_pos_question;
  std::optional<std::string> oracle_neg_question;

  friend bool operator==(const ContrastiveInstance&, const ContrastiveInstance&) = default;
};

/// Checks P >= 1, non-empty document texts and disjoint document ids.
void validate_instance(const ContrastiveInstance& inst);

ContrastiveInstance parse_instance_line(std::string_view line);
std::string instance_to_json_line(const ContrastiveInstance& inst);

std::vector<ContrastiveInstance> load_dataset(const std::filesystem::path& path);
void write_dataset(const std::filesystem::path& path, std::span<const ContrastiveInstance> instances);

/// Fills Document::tokens for every document of every instance.
void assign_tokens(std::vector<ContrastiveInstance>& instances, const Vocabulary& vocab);

/// Every text (documents and oracle questions) in the instances.
std::vector<std::string> collect_texts(std::span<const ContrastiveInstance> instances);

struct QuestionEntry {
  std::string id;
  std::string text;
  friend bool operator==(const QuestionEntry&, const QuestionEntry&) = default;
};

std::vector<QuestionEntry> load_questions(const std::filesystem::path& path);
void write_questions(const std::filesystem::path& path, std::span<const QuestionEntry> questions);

struct SyntheticSpec {
  std::size_t num_pairs = 40;
  std::size_t docs_per_set = 10;
  std::size_t sentences_per_doc = 4;
  std::size_t pool_size = 10;
  double overlap = 0.3;
  std::uint64_t seed = 0;
  /// Seed of the pseudo-word pool; defaults to `seed`. Corpora that share it
  /// draw their topics from the same words.
  std::optional<std::uint64_t> lexicon_seed;
};

struct SyntheticDataset {
  std::vector<ContrastiveInstance> instances;
  /// Oracle questions of both sets plus keyword-recombined distractors.
  std::vector<QuestionEntry> questions;
};

/// One instance per topic pair. The pair shares round(overlap * pool_size)
/// keywords; the rest of each pool is private to its topic. Every document
/// mentions all shared keywords, two of the topic's three core keywords and
/// two further private keywords. The oracle question of a set is
/// "what is" followed by its three core keywords.
SyntheticDataset generate_synthetic(const SyntheticSpec& spec);

}  // namespace mscqg
