// Document-question scorers used for rewards and out-sample ranking. The
// default is a logistic squash of BM25, so scores live strictly in (0, 1).
#pragma once

#include "mscqg/corpus.hpp"

#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace mscqg {

struct Bm25Params {
  double k1 = 1.2;
  double b = 0.75;
};

/// ln(1 + (D - df + 0.5) / (df + 0.5))
double bm25_idf(std::size_t num_docs, std::size_t df);
/// Contribution of one query term occurrence.
double bm25_term(double idf, double tf, double doc_len, double avg_len, const Bm25Params& p);

/// True for ids that carry no lexical content (UNK and the other specials).
inline bool is_special(TokenId t) { return t >= 0 && static_cast<std::size_t>(t) < kNumSpecials; }

/// Document frequencies and lengths over an evaluation pool.
struct CorpusStats {
  std::size_t num_docs = 0;
  double avg_len = 0.0;
  std::unordered_map<TokenId, std::size_t> df;

  static CorpusStats build(std::span<const std::vector<TokenId>> docs);
  static CorpusStats build(std::span<const ContrastiveInstance> instances);
};

class Ranker {
 public:
  virtual ~Ranker() = default;
  /// Relevance of `doc` to `question`, strictly inside (0, 1).
  [[nodiscard]] virtual double score(const Document& doc, std::span<const TokenId> question) const = 0;
};

struct Bm25RankerConfig {
  Bm25Params bm25;
  double slope = 0.5;
  double offset = -2.0;
};

class Bm25Ranker final : public Ranker {
 public:
  Bm25Ranker(CorpusStats stats, Bm25RankerConfig cfg = {});
  [[nodiscard]] double score(const Document& doc, std::span<const TokenId> question) const override;
  [[nodiscard]] double bm25(const Document& doc, std::span<const TokenId> question) const;

 private:
  CorpusStats stats_;
  Bm25RankerConfig cfg_;
};

/// Interface stand-in: every pair gets the same score.
class ConstantRanker final : public Ranker {
 public:
  explicit ConstantRanker(double value = 0.5);
  [[nodiscard]] double score(const Document&, std::span<const TokenId>) const override { return value_; }

 private:
  double value_;
};

struct RankedEntry {
  std::string doc_id;
  double score = 0.0;
  bool positive = false;
};
using RankedList = std::vector<RankedEntry>;

/// Scores every document of the instance; descending score, ties by doc id.
RankedList rank_instance(std::span<const TokenId> question, const ContrastiveInstance& inst, const Ranker& ranker);

std::vector<bool> ranked_labels(const RankedList& list);

}  // namespace mscqg
