#include "mscqg/ranker.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace mscqg {

double bm25_idf(std::size_t num_docs, std::size_t df) {
  const double d = static_cast<double>(num_docs), f = static_cast<double>(df);
  return std::log(1.0 + (d - f + 0.5) / (f + 0.5));
}

double bm25_term(double idf, double tf, double doc_len, double avg_len, const Bm25Params& p) {
  const double norm = avg_len > 0.0 ? doc_len / avg_len : 0.0;
  return idf * tf * (p.k1 + 1.0) / (tf + p.k1 * (1.0 - p.b + p.b * norm));
}

CorpusStats CorpusStats::build(std::span<const std::vector<TokenId>> docs) {
  CorpusStats s;
  s.num_docs = docs.size();
  double total = 0.0;
  for (const auto& d : docs) {
    total += static_cast<double>(d.size());
    std::vector<TokenId> uniq(d.begin(), d.end());
    std::sort(uniq.begin(), uniq.end());
    uniq.erase(std::unique(uniq.begin(), uniq.end()), uniq.end());
    for (TokenId t : uniq) ++s.df[t];
  }
  s.avg_len = docs.empty() ? 0.0 : total / static_cast<double>(docs.size());
  return s;
}

CorpusStats CorpusStats::build(std::span<const ContrastiveInstance> instances) {
  std::vector<std::vector<TokenId>> docs;
  for (const auto& inst : instances) {
    for (const auto& d : inst.positive_docs) docs.push_back(d.tokens);
    for (const auto& d : inst.negative_docs) docs.push_back(d.tokens);
  }
  return build(docs);
}

Bm25Ranker::Bm25Ranker(CorpusStats stats, Bm25RankerConfig cfg) : stats_(std::move(stats)), cfg_(cfg) {
  if (stats_.num_docs == 0) throw std::invalid_argument("bm25 ranker: statistics cover no documents");
}

double Bm25Ranker::bm25(const Document& doc, std::span<const TokenId> question) const {
  double total = 0.0;
  const double len = static_cast<double>(doc.tokens.size());
  for (TokenId q : question) {
    if (is_special(q)) continue;
    const auto tf = static_cast<double>(std::count(doc.tokens.begin(), doc.tokens.end(), q));
    if (tf == 0.0) continue;
    auto it = stats_.df.find(q);
    const std::size_t df = it == stats_.df.end() ? 0 : it->second;
    total += bm25_term(bm25_idf(stats_.num_docs, df), tf, len, stats_.avg_len, cfg_.bm25);
  }
  return total;
}

double Bm25Ranker::score(const Document& doc, std::span<const TokenId> question) const {
  const double x = cfg_.slope * bm25(doc, question) + cfg_.offset;
  double s = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
  // Keep the open interval even when the logistic saturates.
  if (s >= 1.0) s = std::nextafter(1.0, 0.0);
  if (s <= 0.0) s = std::numeric_limits<double>::denorm_min();
  return s;
}

ConstantRanker::ConstantRanker(double value) : value_(value) {
  if (!(value > 0.0 && value < 1.0)) throw std::invalid_argument("constant ranker: score must lie in (0, 1)");
}

RankedList rank_instance(std::span<const TokenId> question, const ContrastiveInstance& inst, const Ranker& ranker) {
  RankedList out;
  for (const auto& d : inst.positive_docs) out.push_back({d.id, ranker.score(d, question), true});
  for (const auto& d : inst.negative_docs) out.push_back({d.id, ranker.score(d, question), false});
  std::sort(out.begin(), out.end(), [](const RankedEntry& a, const RankedEntry& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.doc_id < b.doc_id;
  });
  return out;
}

std::vector<bool> ranked_labels(const RankedList& list) {
  std::vector<bool> labels;
  labels.reserve(list.size());
  for (const auto& e : list) labels.push_back(e.positive);
  return labels;
}

}  // namespace mscqg
