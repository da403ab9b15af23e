#include "mscqg/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <stdexcept>

namespace mscqg {

InvertedIndex::InvertedIndex(std::vector<std::pair<std::string, std::vector<TokenId>>> docs, Bm25Params params)
    : params_(params) {
  std::sort(docs.begin(), docs.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  for (std::size_t i = 1; i < docs.size(); ++i) {
    if (docs[i].first == docs[i - 1].first) throw std::invalid_argument("index: duplicate document id '" + docs[i].first + "'");
  }
  double total = 0.0;
  for (std::size_t i = 0; i < docs.size(); ++i) {
    doc_ids_.push_back(docs[i].first);
    lengths_.push_back(docs[i].second.size());
    total += static_cast<double>(docs[i].second.size());
    std::map<TokenId, std::size_t> tf;
    for (TokenId t : docs[i].second) {
      if (!is_special(t)) ++tf[t];
    }
    for (const auto& [t, n] : tf) postings_[t].push_back({i, n});
  }
  avg_len_ = docs.empty() ? 0.0 : total / static_cast<double>(docs.size());
}

std::size_t InvertedIndex::df(TokenId t) const {
  auto it = postings_.find(t);
  return it == postings_.end() ? 0 : it->second.size();
}

const std::vector<Posting>* InvertedIndex::postings(TokenId t) const {
  auto it = postings_.find(t);
  return it == postings_.end() ? nullptr : &it->second;
}

InvertedIndex index_documents(std::span<const ContrastiveInstance> instances, Bm25Params params) {
  std::vector<std::pair<std::string, std::vector<TokenId>>> docs;
  for (const auto& inst : instances) {
    for (const auto& d : inst.positive_docs) docs.emplace_back(d.id, d.tokens);
    for (const auto& d : inst.negative_docs) docs.emplace_back(d.id, d.tokens);
  }
  return InvertedIndex(std::move(docs), params);
}

std::vector<SearchHit> bm25_search(const InvertedIndex& index, std::span<const TokenId> query, std::size_t k) {
  if (index.size() == 0) throw std::invalid_argument("bm25_search: index is empty");
  if (k == 0) throw std::invalid_argument("bm25_search: k must be >= 1");
  std::vector<double> scores(index.size(), 0.0);
  std::vector<bool> hit(index.size(), false);
  for (TokenId t : query) {
    const auto* list = index.postings(t);
    if (list == nullptr) continue;
    const double idf = bm25_idf(index.size(), list->size());
    for (const Posting& p : *list) {
      scores[p.doc] += bm25_term(idf, static_cast<double>(p.tf), static_cast<double>(index.doc_length(p.doc)),
                                 index.avg_len(), index.params());
      hit[p.doc] = true;
    }
  }
  std::vector<std::size_t> order;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (hit[i]) order.push_back(i);
  }
  // Documents are stored in id order, so a stable sort by score keeps ties by id.
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  if (order.size() > k) order.resize(k);
  std::vector<SearchHit> out;
  for (std::size_t i : order) out.push_back({index.doc_ids()[i], scores[i]});
  return out;
}

double average_precision(const std::vector<bool>& labels, std::size_t num_relevant) {
  if (num_relevant == 0) throw std::invalid_argument("metrics: num_relevant must be >= 1");
  double sum = 0.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (!labels[i]) continue;
    ++hits;
    sum += static_cast<double>(hits) / static_cast<double>(i + 1);
  }
  return sum / static_cast<double>(num_relevant);
}

double precision_at(const std::vector<bool>& labels, std::size_t k) {
  if (k == 0) throw std::invalid_argument("metrics: k must be >= 1");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < std::min(k, labels.size()); ++i) hits += labels[i] ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(k);
}

MetricReport compute_retrieval_metrics(const std::vector<bool>& labels, std::size_t num_relevant, std::size_t k) {
  if (num_relevant == 0) throw std::invalid_argument("metrics: num_relevant must be >= 1");
  MetricReport r;
  r.k = k;
  r.map = average_precision(labels, num_relevant);
  r.rprec = precision_at(labels, num_relevant);
  r.p_at_k = precision_at(labels, k);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i]) {
      r.mrr = 1.0 / static_cast<double>(i + 1);
      r.mrr10 = i < 10 ? r.mrr : 0.0;
      break;
    }
  }
  double dcg = 0.0, ideal = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i]) dcg += 1.0 / std::log2(static_cast<double>(i + 2));
  }
  for (std::size_t i = 0; i < num_relevant; ++i) ideal += 1.0 / std::log2(static_cast<double>(i + 2));
  r.ndcg = dcg / ideal;
  return r;
}

MetricReport out_sample_eval(std::span<const TokenId> question, const ContrastiveInstance& inst, const Ranker& ranker,
                             std::size_t k) {
  const auto list = rank_instance(question, inst, ranker);
  return compute_retrieval_metrics(ranked_labels(list), inst.positive_docs.size(), k);
}

MetricReport augmented_eval(std::span<const TokenId> question, const ContrastiveInstance& inst,
                            const InvertedIndex& index, std::size_t depth, std::size_t k) {
  std::set<std::string> relevant;
  for (const auto& d : inst.positive_docs) relevant.insert(d.id);
  std::vector<bool> labels;
  for (const auto& hit : bm25_search(index, question, depth)) labels.push_back(relevant.contains(hit.id));
  return compute_retrieval_metrics(labels, inst.positive_docs.size(), k);
}

MetricReport mean_report(std::span<const MetricReport> reports) {
  MetricReport m;
  if (reports.empty()) return m;
  m.k = reports.front().k;
  for (const auto& r : reports) {
    m.map += r.map;
    m.rprec += r.rprec;
    m.mrr += r.mrr;
    m.mrr10 += r.mrr10;
    m.ndcg += r.ndcg;
    m.p_at_k += r.p_at_k;
  }
  const double n = static_cast<double>(reports.size());
  m.map /= n;
  m.rprec /= n;
  m.mrr /= n;
  m.mrr10 /= n;
  m.ndcg /= n;
  m.p_at_k /= n;
  return m;
}

namespace {

InvertedIndex index_questions(const std::vector<QuestionEntry>& entries,
                              const std::vector<std::vector<TokenId>>& tokens, Bm25Params params) {
  std::vector<std::pair<std::string, std::vector<TokenId>>> docs;
  for (std::size_t i = 0; i < entries.size(); ++i) docs.emplace_back(entries[i].id, tokens[i]);
  return InvertedIndex(std::move(docs), params);
}

}  // namespace

QuestionCorpus::QuestionCorpus(std::vector<QuestionEntry> questions, const Vocabulary& vocab, Bm25Params params)
    : entries(std::move(questions)) {
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (!by_id_.emplace(entries[i].id, i).second) {
      throw std::invalid_argument("question corpus: duplicate id '" + entries[i].id + "'");
    }
    tokens.push_back(tokenize(entries[i].text, vocab));
  }
  index = index_questions(entries, tokens, params);
}

std::size_t QuestionCorpus::position(const std::string& id) const {
  auto it = by_id_.find(id);
  if (it == by_id_.end()) throw std::out_of_range("question corpus: unknown id '" + id + "'");
  return it->second;
}

std::vector<std::vector<std::string>> retrieve_question_sets(const ContrastiveInstance& inst,
                                                             const QuestionCorpus& corpus, std::size_t k) {
  std::vector<std::vector<std::string>> sets;
  for (const auto& d : inst.positive_docs) {
    std::vector<std::string> ids;
    for (const auto& hit : bm25_search(corpus.index, d.tokens, k)) ids.push_back(hit.id);
    sets.push_back(std::move(ids));
  }
  return sets;
}

TfidfModel::TfidfModel(std::span<const std::vector<TokenId>> fit_docs) : n_(fit_docs.size()) {
  for (const auto& d : fit_docs) {
    std::set<TokenId> uniq;
    for (TokenId t : d) {
      if (!is_special(t)) uniq.insert(t);
    }
    for (TokenId t : uniq) ++df_[t];
  }
}

std::map<TokenId, double> TfidfModel::transform(std::span<const TokenId> tokens) const {
  std::map<TokenId, double> v;
  for (TokenId t : tokens) {
    if (!is_special(t)) v[t] += 1.0;
  }
  for (auto& [t, x] : v) {
    auto it = df_.find(t);
    const double df = it == df_.end() ? 0.0 : static_cast<double>(it->second);
    x *= std::log((1.0 + static_cast<double>(n_)) / (1.0 + df)) + 1.0;
  }
  return v;
}

double TfidfModel::cosine(const std::map<TokenId, double>& a, const std::map<TokenId, double>& b) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (const auto& [t, x] : a) {
    na += x * x;
    auto it = b.find(t);
    if (it != b.end()) dot += x * it->second;
  }
  for (const auto& [t, x] : b) nb += x * x;
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot / std::sqrt(na * nb);
}

QuestionEntry top_tfidf_at_k(const ContrastiveInstance& inst, const QuestionCorpus& corpus, std::size_t k) {
  std::set<std::string> candidates;
  for (const auto& ids : retrieve_question_sets(inst, corpus, k)) candidates.insert(ids.begin(), ids.end());
  if (candidates.empty()) throw std::runtime_error("top-tfidf: no question retrieved for instance '" + inst.id + "'");

  std::vector<std::vector<TokenId>> fit;
  for (const auto& id : candidates) fit.push_back(corpus.tokens[corpus.position(id)]);
  for (const auto& d : inst.positive_docs) fit.push_back(d.tokens);
  const TfidfModel model(fit);
  std::vector<std::map<TokenId, double>> doc_vecs;
  for (const auto& d : inst.positive_docs) doc_vecs.push_back(model.transform(d.tokens));

  // std::set iterates ids in ascending order, so strict '>' keeps the lowest id on ties.
  const std::string* best = nullptr;
  double best_score = -1.0;
  for (const auto& id : candidates) {
    const auto q = model.transform(corpus.tokens[corpus.position(id)]);
    double s = 0.0;
    for (const auto& dv : doc_vecs) s += TfidfModel::cosine(q, dv);
    if (s > best_score) {
      best_score = s;
      best = &id;
    }
  }
  return corpus.entries[corpus.position(*best)];
}

QuestionEntry top_frequent_at_k(const ContrastiveInstance& inst, const QuestionCorpus& corpus, std::size_t k) {
  std::map<std::string, std::size_t> counts;
  for (const auto& ids : retrieve_question_sets(inst, corpus, k)) {
    for (const auto& id : ids) ++counts[id];
  }
  if (counts.empty()) throw std::runtime_error("top-frequent: no question retrieved for instance '" + inst.id + "'");
  auto best = counts.begin();
  for (auto it = counts.begin(); it != counts.end(); ++it) {
    if (it->second > best->second) best = it;
  }
  return corpus.entries[corpus.position(best->first)];
}

std::vector<TokenId> msqg_decode(const GeneratorParams& gen, const ContrastiveInstance& inst, std::size_t max_len) {
  if (inst.positive_docs.empty()) throw std::invalid_argument("msqg: instance has no positive documents");
  std::vector<GeneratorStream> streams;
  for (const auto& d : inst.positive_docs) {
    streams.emplace_back(gen);
    streams.back().extend(decode_prefix(d.tokens, gen.config.max_context, max_len));
  }
  const double share = 1.0 / static_cast<double>(streams.size());
  std::vector<TokenId> question;
  for (std::size_t t = 0; t < max_len; ++t) {
    RowVector avg = RowVector::Zero(static_cast<Eigen::Index>(gen.config.vocab_size));
    for (auto& s : streams) {
      const auto out = t == 0 ? s.output() : s.push(question.back());
      avg += share * out.dist;
    }
    const auto tok = static_cast<TokenId>(argmax_lowest(std::span<const double>(avg.data(), avg.size())));
    if (tok == kEos) break;
    question.push_back(tok);
  }
  return question;
}

}  // namespace mscqg
