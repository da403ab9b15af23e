#include "mscqg/corpus.hpp"

#include "mscqg/rng.hpp"

#include <json.hpp>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

namespace mscqg {

namespace {

const std::vector<std::string>& special_words() {
  static const std::vector<std::string> kWords = {"<unk>", "<sep>", "<eos>", "<pad>"};
  return kWords;
}

bool is_word_byte(unsigned char c) { return std::isalnum(c) != 0 || c >= 0x80; }

}  // namespace

std::vector<std::string> normalize_words(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (is_word_byte(c)) {
      cur.push_back(static_cast<char>(c < 0x80 ? std::tolower(c) : c));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

Vocabulary::Vocabulary() : words_(special_words()) {
  for (std::size_t i = 0; i < words_.size(); ++i) index_.emplace(words_[i], static_cast<TokenId>(i));
}

Vocabulary Vocabulary::build(std::span<const std::string> texts, std::size_t max_size) {
  if (texts.empty()) throw DatasetError("build_vocabulary: empty corpus");
  if (max_size < kNumSpecials) throw DatasetError("build_vocabulary: max_size must be at least 4");
  std::map<std::string, std::size_t> counts;
  for (const auto& t : texts) {
    for (auto& w : normalize_words(t)) ++counts[std::move(w)];
  }
  if (counts.empty()) throw DatasetError("build_vocabulary: corpus contains no words");
  std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  const std::size_t keep = std::min(ranked.size(), max_size - kNumSpecials);
  std::vector<std::string> words;
  words.reserve(keep);
  for (std::size_t i = 0; i < keep; ++i) words.push_back(ranked[i].first);
  return from_words(std::move(words));
}

Vocabulary Vocabulary::from_words(std::vector<std::string> words) {
  Vocabulary v;
  for (auto& w : words) {
    if (v.index_.contains(w)) throw DatasetError("vocabulary: duplicate word '" + w + "'");
    v.index_.emplace(w, static_cast<TokenId>(v.words_.size()));
    v.words_.push_back(std::move(w));
  }
  return v;
}

TokenId Vocabulary::id(std::string_view word) const {
  auto it = index_.find(std::string(word));
  return it == index_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::word(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= words_.size()) throw std::out_of_range("vocabulary: id out of range");
  return words_[static_cast<std::size_t>(id)];
}

std::vector<std::string> Vocabulary::regular_words() const {
  return {words_.begin() + static_cast<std::ptrdiff_t>(kNumSpecials), words_.end()};
}

std::vector<TokenId> tokenize(std::string_view text, const Vocabulary& vocab) {
  std::vector<TokenId> ids;
  for (const auto& w : normalize_words(text)) ids.push_back(vocab.id(w));
  return ids;
}

std::string detokenize(std::span<const TokenId> ids, const Vocabulary& vocab) {
  std::string out;
  for (TokenId id : ids) {
    if (id == kSep || id == kEos || id == kPad) continue;
    if (!out.empty()) out.push_back(' ');
    out += vocab.word(id);
  }
  return out;
}

// ---------------------------------------------------------------------------
// JSONL

void validate_instance(const ContrastiveInstance& inst) {
  if (inst.id.empty()) throw DatasetError("instance has an empty id");
  if (inst.positive_docs.empty()) throw DatasetError("instance '" + inst.id + "': positive_docs is empty");
  std::set<std::string> seen;
  auto check = [&](const std::vector<Document>& docs, const char* set_name) {
    for (const auto& d : docs) {
      if (d.id.empty()) throw DatasetError("instance '" + inst.id + "': document with empty id in " + set_name);
      if (normalize_words(d.text).empty()) {
        throw DatasetError("instance '" + inst.id + "': document '" + d.id + "' has no tokens");
      }
      if (!seen.insert(d.id).second) {
        throw DatasetError("instance '" + inst.id + "': document id '" + d.id +
                           "' appears more than once (positive and negative sets must not overlap)");
      }
    }
  };
  check(inst.positive_docs, "positive_docs");
  check(inst.negative_docs, "negative_docs");
}

namespace {

using OrderedJson = nlohmann::ordered_json;

std::vector<Document> parse_docs(const nlohmann::json& j, const char* field) {
  if (!j.contains(field)) throw DatasetError(std::string("missing field '") + field + "'");
  const auto& arr = j.at(field);
  if (!arr.is_array()) throw DatasetError(std::string("field '") + field + "' must be an array");
  std::vector<Document> docs;
  for (const auto& d : arr) {
    if (!d.is_object() || !d.contains("id") || !d.contains("text") || !d.at("id").is_string() ||
        !d.at("text").is_string()) {
      throw DatasetError(std::string("field '") + field + "': every document needs string 'id' and 'text'");
    }
    docs.push_back(Document{d.at("id").get<std::string>(), d.at("text").get<std::string>(), {}});
  }
  return docs;
}

std::optional<std::string> parse_optional_string(const nlohmann::json& j, const char* field) {
  if (!j.contains(field) || j.at(field).is_null()) return std::nullopt;
  if (!j.at(field).is_string()) throw DatasetError(std::string("field '") + field + "' must be a string or null");
  return j.at(field).get<std::string>();
}

OrderedJson docs_to_json(const std::vector<Document>& docs) {
  OrderedJson arr = OrderedJson::array();
  for (const auto& d : docs) {
    OrderedJson o;
    o["id"] = d.id;
    o["text"] = d.text;
    arr.push_back(std::move(o));
  }
  return arr;
}

template <class Fn>
void for_each_line(const std::filesystem::path& path, Fn&& fn) {
  std::ifstream in(path);
  if (!in) throw DatasetError("cannot open '" + path.string() + "'");
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    try {
      fn(line);
    } catch (const std::exception& e) {
      throw DatasetError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

}  // namespace

ContrastiveInstance parse_instance_line(std::string_view line) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::parse_error& e) {
    throw DatasetError(std::string("malformed JSON: ") + e.what());
  }
  if (!j.is_object()) throw DatasetError("line is not a JSON object");
  if (!j.contains("id") || !j.at("id").is_string()) throw DatasetError("missing field 'id'");
  ContrastiveInstance inst;
  inst.id = j.at("id").get<std::string>();
  inst.positive_docs = parse_docs(j, "positive_docs");
  inst.negative_docs = parse_docs(j, "negative_docs");
  inst.oracle_pos_question = parse_optional_string(j, "oracle_pos_question");
  inst.oracle_neg_question = parse_optional_string(j, "oracle_neg_question");
  validate_instance(inst);
  return inst;
}

std::string instance_to_json_line(const ContrastiveInstance& inst) {
  OrderedJson o;
  o["id"] = inst.id;
  o["positive_docs"] = docs_to_json(inst.positive_docs);
  o["negative_docs"] = docs_to_json(inst.negative_docs);
  o["oracle_pos_question"] = inst.oracle_pos_question ? OrderedJson(*inst.oracle_pos_question) : OrderedJson(nullptr);
  o["oracle_neg_question"] = inst.oracle_neg_question ? OrderedJson(*inst.oracle_neg_question) : OrderedJson(nullptr);
  return o.dump();
}

std::vector<ContrastiveInstance> load_dataset(const std::filesystem::path& path) {
  std::vector<ContrastiveInstance> out;
  std::set<std::string> ids;
  for_each_line(path, [&](const std::string& line) {
    auto inst = parse_instance_line(line);
    if (!ids.insert(inst.id).second) throw DatasetError("duplicate instance id '" + inst.id + "'");
    out.push_back(std::move(inst));
  });
  return out;
}

void write_dataset(const std::filesystem::path& path, std::span<const ContrastiveInstance> instances) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DatasetError("cannot write '" + path.string() + "'");
  for (const auto& inst : instances) out << instance_to_json_line(inst) << '\n';
}

void assign_tokens(std::vector<ContrastiveInstance>& instances, const Vocabulary& vocab) {
  for (auto& inst : instances) {
    for (auto& d : inst.positive_docs) d.tokens = tokenize(d.text, vocab);
    for (auto& d : inst.negative_docs) d.tokens = tokenize(d.text, vocab);
  }
}

std::vector<std::string> collect_texts(std::span<const ContrastiveInstance> instances) {
  std::vector<std::string> texts;
  for (const auto& inst : instances) {
    for (const auto& d : inst.positive_docs) texts.push_back(d.text);
    for (const auto& d : inst.negative_docs) texts.push_back(d.text);
    if (inst.oracle_pos_question) texts.push_back(*inst.oracle_pos_question);
    if (inst.oracle_neg_question) texts.push_back(*inst.oracle_neg_question);
  }
  return texts;
}

std::vector<QuestionEntry> load_questions(const std::filesystem::path& path) {
  std::vector<QuestionEntry> out;
  std::set<std::string> ids;
  for_each_line(path, [&](const std::string& line) {
    auto j = nlohmann::json::parse(line);
    if (!j.is_object() || !j.contains("id") || !j.contains("text") || !j.at("id").is_string() ||
        !j.at("text").is_string()) {
      throw DatasetError("question line needs string 'id' and 'text'");
    }
    QuestionEntry q{j.at("id").get<std::string>(), j.at("text").get<std::string>()};
    if (!ids.insert(q.id).second) throw DatasetError("duplicate question id '" + q.id + "'");
    out.push_back(std::move(q));
  });
  return out;
}

void write_questions(const std::filesystem::path& path, std::span<const QuestionEntry> questions) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DatasetError("cannot write '" + path.string() + "'");
  for (const auto& q : questions) {
    OrderedJson o;
    o["id"] = q.id;
    o["text"] = q.text;
    out << o.dump() << '\n';
  }
}

// ---------------------------------------------------------------------------
// Synthetic data

namespace {

constexpr std::size_t kCoreKeywords = 3;
constexpr std::size_t kIncludedCore = 2;
constexpr std::size_t kExtraPrivate = 2;
constexpr double kSharedWeight = 1.5;
constexpr double kCoreWeight = 1.5;
constexpr double kExtraWeight = 1.0;

// Each template has exactly three keyword slots, written as {}.
const std::vector<std::string>& sentence_templates() {
  static const std::vector<std::string> kTemplates = {
      "the {} of the {} is a {}",
      "a {} and the {} can make {}",
      "in the {} there are {} with {}",
      "this {} has the {} for {}",
      "they use {} to find the {} in {}",
      "some {} are from the {} near {}",
  };
  return kTemplates;
}

const std::string& opening_template() {
  static const std::string kOpening = "what is the {} of {} and {}";
  return kOpening;
}

std::string fill_template(const std::string& tpl, std::span<const std::string> words) {
  std::string out;
  std::size_t k = 0;
  for (std::size_t i = 0; i < tpl.size(); ++i) {
    if (tpl[i] == '{' && i + 1 < tpl.size() && tpl[i + 1] == '}') {
      out += words[k++];
      ++i;
    } else {
      out.push_back(tpl[i]);
    }
  }
  return out;
}

std::set<std::string> template_words() {
  std::set<std::string> words;
  for (const auto& t : sentence_templates()) {
    for (auto& w : normalize_words(t)) words.insert(std::move(w));
  }
  for (auto& w : normalize_words(opening_template())) words.insert(std::move(w));
  return words;
}

/// Pronounceable pseudo-words that never collide with template words.
std::vector<std::string> build_lexicon(std::size_t n, Rng& rng) {
  static const std::string kConsonants = "bdfgklmnprstvz";
  static const std::string kVowels = "aeiou";
  const auto reserved = template_words();
  std::set<std::string> seen;
  std::vector<std::string> lexicon;
  while (lexicon.size() < n) {
    const std::size_t syllables = 2 + uniform_index(rng, 2);
    std::string w;
    for (std::size_t s = 0; s < syllables; ++s) {
      w.push_back(kConsonants[uniform_index(rng, kConsonants.size())]);
      w.push_back(kVowels[uniform_index(rng, kVowels.size())]);
    }
    if (reserved.contains(w) || !seen.insert(w).second) continue;
    lexicon.push_back(std::move(w));
  }
  return lexicon;
}

template <class T>
void shuffle_in_place(std::vector<T>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[uniform_index(rng, i)]);
}

struct TopicPool {
  std::vector<std::string> shared;
  std::vector<std::string> core;
  std::vector<std::string> extra;
};

std::string make_document(const TopicPool& pool, std::size_t doc_index, std::size_t docs_per_set,
                          std::size_t sentences, Rng& rng) {
  std::vector<std::pair<std::string, double>> weighted;
  for (const auto& w : pool.shared) weighted.emplace_back(w, kSharedWeight);
  // Rotating exclusion keeps every core keyword in most documents of the set.
  std::vector<std::string> included_core = pool.core;
  if (docs_per_set >= 2 && pool.core.size() > kIncludedCore) {
    included_core.erase(included_core.begin() + static_cast<std::ptrdiff_t>(doc_index % pool.core.size()));
    while (included_core.size() > kIncludedCore) included_core.pop_back();
  }
  for (const auto& w : included_core) weighted.emplace_back(w, kCoreWeight);
  std::vector<std::string> extras = pool.extra;
  shuffle_in_place(extras, rng);
  if (extras.size() > kExtraPrivate) extras.resize(kExtraPrivate);
  for (const auto& w : extras) weighted.emplace_back(w, kExtraWeight);

  const std::size_t slots_needed = weighted.size();
  const std::size_t n_sentences = std::max(sentences, (slots_needed + 2) / 3);
  const std::size_t n_slots = n_sentences * 3;

  std::vector<std::string> slots;
  for (const auto& [w, _] : weighted) slots.push_back(w);
  std::vector<double> weights;
  for (const auto& [_, wt] : weighted) weights.push_back(wt);
  while (slots.size() < n_slots) slots.push_back(weighted[sample_categorical(rng, weights)].first);
  shuffle_in_place(slots, rng);

  std::string text;
  const auto& templates = sentence_templates();
  for (std::size_t s = 0; s < n_sentences; ++s) {
    const std::string& tpl = s == 0 ? opening_template() : templates[uniform_index(rng, templates.size())];
    if (!text.empty()) text += ". ";
    text += fill_template(tpl, std::span<const std::string>(slots).subspan(s * 3, 3));
  }
  text += ".";
  return text;
}

std::string question_from(std::span<const std::string> keywords) {
  std::string q = "what is";
  for (const auto& k : keywords) q += " " + k;
  return q;
}

}  // namespace

SyntheticDataset generate_synthetic(const SyntheticSpec& spec) {
  if (!(spec.overlap >= 0.0 && spec.overlap <= 1.0)) throw DatasetError("synthetic: overlap fraction must be in [0, 1]");
  if (spec.num_pairs == 0) throw DatasetError("synthetic: need at least one topic pair");
  if (spec.docs_per_set == 0) throw DatasetError("synthetic: need at least one document per set");
  if (spec.sentences_per_doc == 0) throw DatasetError("synthetic: need at least one sentence per document");
  if (spec.pool_size == 0) throw DatasetError("synthetic: keyword pool must be non-empty");

  Rng rng = make_stream(spec.seed, "data");
  const auto n_shared = static_cast<std::size_t>(std::lround(spec.overlap * static_cast<double>(spec.pool_size)));
  const std::size_t n_private = spec.pool_size - n_shared;
  const std::size_t per_pair = n_shared + 2 * n_private;
  Rng lexicon_rng = make_stream(spec.lexicon_seed.value_or(spec.seed), "lexicon");
  const auto lexicon = build_lexicon(std::max<std::size_t>(300, 3 * per_pair), lexicon_rng);

  SyntheticDataset out;
  for (std::size_t p = 0; p < spec.num_pairs; ++p) {
    std::vector<std::size_t> picks(lexicon.size());
    for (std::size_t i = 0; i < picks.size(); ++i) picks[i] = i;
    shuffle_in_place(picks, rng);
    std::size_t cursor = 0;
    auto take = [&](std::size_t n) {
      std::vector<std::string> ws;
      for (std::size_t i = 0; i < n; ++i) ws.push_back(lexicon[picks[cursor++]]);
      return ws;
    };
    const auto shared = take(n_shared);
    auto make_pool = [&] {
      TopicPool pool;
      pool.shared = shared;
      auto priv = take(n_private);
      const std::size_t n_core = std::min(kCoreKeywords, priv.size());
      pool.core.assign(priv.begin(), priv.begin() + static_cast<std::ptrdiff_t>(n_core));
      pool.extra.assign(priv.begin() + static_cast<std::ptrdiff_t>(n_core), priv.end());
      return pool;
    };
    const TopicPool pos_pool = make_pool();
    const TopicPool neg_pool = make_pool();

    ContrastiveInstance inst;
    inst.id = "pair-" + std::to_string(p);
    for (std::size_t d = 0; d < spec.docs_per_set; ++d) {
      inst.positive_docs.push_back(
          Document{inst.id + "-pos-" + std::to_string(d),
                   make_document(pos_pool, d, spec.docs_per_set, spec.sentences_per_doc, rng), {}});
    }
    for (std::size_t d = 0; d < spec.docs_per_set; ++d) {
      inst.negative_docs.push_back(
          Document{inst.id + "-neg-" + std::to_string(d),
                   make_document(neg_pool, d, spec.docs_per_set, spec.sentences_per_doc, rng), {}});
    }
    // Core keywords may be empty when the whole pool is shared.
    const auto& pos_kw = pos_pool.core.empty() ? pos_pool.shared : pos_pool.core;
    const auto& neg_kw = neg_pool.core.empty() ? neg_pool.shared : neg_pool.core;
    inst.oracle_pos_question = question_from(std::span(pos_kw).first(std::min<std::size_t>(kCoreKeywords, pos_kw.size())));
    inst.oracle_neg_question = question_from(std::span(neg_kw).first(std::min<std::size_t>(kCoreKeywords, neg_kw.size())));

    out.questions.push_back({inst.id + "-q-pos", *inst.oracle_pos_question});
    out.questions.push_back({inst.id + "-q-neg", *inst.oracle_neg_question});
    // Distractors mix shared and private keywords of both topics.
    for (int k = 0; k < 2; ++k) {
      for (const TopicPool* pool : {&pos_pool, &neg_pool}) {
        std::vector<std::string> mix = pool->shared;
        mix.insert(mix.end(), pool->core.begin(), pool->core.end());
        mix.insert(mix.end(), pool->extra.begin(), pool->extra.end());
        shuffle_in_place(mix, rng);
        mix.resize(std::min<std::size_t>(mix.size(), 3));
        const std::string tag = pool == &pos_pool ? "pos" : "neg";
        out.questions.push_back({inst.id + "-q-" + tag + "-mix" + std::to_string(k), question_from(mix)});
      }
    }
    validate_instance(inst);
    out.instances.push_back(std::move(inst));
  }
  return out;
}

}  // namespace mscqg
