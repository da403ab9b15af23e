// Inverted index with BM25 search, binary-relevance ranking metrics, the two
// evaluation protocols and the retrieval / averaging baselines.
#pragma once

#include "mscqg/coordinator.hpp"
#include "mscqg/corpus.hpp"
#include "mscqg/docgen.hpp"
#include "mscqg/ranker.hpp"

#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace mscqg {

struct Posting {
  std::size_t doc = 0;  // index into InvertedIndex::doc_ids
  std::size_t tf = 0;
};

/// Documents are stored sorted by id so that the index does not depend on
/// insertion order.
class InvertedIndex {
 public:
  InvertedIndex() = default;
  InvertedIndex(std::vector<std::pair<std::string, std::vector<TokenId>>> docs, Bm25Params params = {});

  [[nodiscard]] std::size_t size() const { return doc_ids_.size(); }
  [[nodiscard]] const std::vector<std::string>& doc_ids() const { return doc_ids_; }
  [[nodiscard]] double avg_len() const { return avg_len_; }
  [[nodiscard]] std::size_t doc_length(std::size_t doc) const { return lengths_[doc]; }
  [[nodiscard]] std::size_t df(TokenId t) const;
  [[nodiscard]] const std::vector<Posting>* postings(TokenId t) const;
  [[nodiscard]] const Bm25Params& params() const { return params_; }

 private:
  std::vector<std::string> doc_ids_;
  std::vector<std::size_t> lengths_;
  double avg_len_ = 0.0;
  std::map<TokenId, std::vector<Posting>> postings_;
  Bm25Params params_;
};

InvertedIndex index_documents(std::span<const ContrastiveInstance> instances, Bm25Params params = {});

struct SearchHit {
  std::string id;
  double score = 0.0;
};

/// Top-k documents with positive BM25 score; ties by ascending id.
std::vector<SearchHit> bm25_search(const InvertedIndex& index, std::span<const TokenId> query, std::size_t k);

struct MetricReport {
  double map = 0.0;
  double rprec = 0.0;
  double mrr = 0.0;
  double mrr10 = 0.0;
  double ndcg = 0.0;
  double p_at_k = 0.0;
  std::size_t k = 10;
};

double average_precision(const std::vector<bool>& labels, std::size_t num_relevant);
/// Relevant items in the first k positions divided by k.
double precision_at(const std::vector<bool>& labels, std::size_t k);

/// `labels` in ranked order. Relevant items absent from the list count as
/// never retrieved. nDCG uses binary gains over the whole list, normalised by
/// the ideal ordering of `num_relevant` relevant items.
MetricReport compute_retrieval_metrics(const std::vector<bool>& labels, std::size_t num_relevant, std::size_t k = 10);

MetricReport out_sample_eval(std::span<const TokenId> question, const ContrastiveInstance& inst, const Ranker& ranker,
                             std::size_t k = 10);
MetricReport augmented_eval(std::span<const TokenId> question, const ContrastiveInstance& inst,
                            const InvertedIndex& index, std::size_t depth = 100, std::size_t k = 10);

/// Mean of every field across reports.
MetricReport mean_report(std::span<const MetricReport> reports);

struct QuestionCorpus {
  std::vector<QuestionEntry> entries;
  std::vector<std::vector<TokenId>> tokens;  // parallel to entries
  InvertedIndex index;

  QuestionCorpus(std::vector<QuestionEntry> questions, const Vocabulary& vocab, Bm25Params params = {});
  [[nodiscard]] std::size_t position(const std::string& id) const;

 private:
  std::map<std::string, std::size_t> by_id_;
};

/// Per positive document: the ids of its top-k questions by BM25.
std::vector<std::vector<std::string>> retrieve_question_sets(const ContrastiveInstance& inst,
                                                             const QuestionCorpus& corpus, std::size_t k);

/// TF-IDF vectors with idf = ln((1 + n) / (1 + df)) + 1 fitted on `fit_docs`.
class TfidfModel {
 public:
  explicit TfidfModel(std::span<const std::vector<TokenId>> fit_docs);
  [[nodiscard]] std::map<TokenId, double> transform(std::span<const TokenId> tokens) const;
  static double cosine(const std::map<TokenId, double>& a, const std::map<TokenId, double>& b);

 private:
  std::size_t n_ = 0;
  std::map<TokenId, std::size_t> df_;
};

/// Candidate question maximising the summed TF-IDF cosine to the positive
/// documents among the union of per-document top-k retrievals. Ties go to
/// the lowest question id.
QuestionEntry top_tfidf_at_k(const ContrastiveInstance& inst, const QuestionCorpus& corpus, std::size_t k = 100);
/// Question present in the most per-document top-k sets; ties to lowest id.
QuestionEntry top_frequent_at_k(const ContrastiveInstance& inst, const QuestionCorpus& corpus, std::size_t k = 100);

/// Greedy decoding from the uniform average of the positive documents'
/// next-token distributions.
std::vector<TokenId> msqg_decode(const GeneratorParams& gen, const ContrastiveInstance& inst, std::size_t max_len);

}  // namespace mscqg
