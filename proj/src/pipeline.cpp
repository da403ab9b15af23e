#include "mscqg/pipeline.hpp"

#include <map>
#include <numeric>
#include <stdexcept>

namespace mscqg {

std::vector<std::pair<std::vector<TokenId>, std::vector<TokenId>>> generator_pairs(
    std::span<const ContrastiveInstance> instances, const Vocabulary& vocab) {
  std::vector<std::pair<std::vector<TokenId>, std::vector<TokenId>>> pairs;
  for (const auto& inst : instances) {
    if (inst.oracle_pos_question) {
      const auto q = tokenize(*inst.oracle_pos_question, vocab);
      for (const auto& d : inst.positive_docs) pairs.emplace_back(d.tokens, q);
    }
    if (inst.oracle_neg_question) {
      const auto q = tokenize(*inst.oracle_neg_question, vocab);
      for (const auto& d : inst.negative_docs) pairs.emplace_back(d.tokens, q);
    }
  }
  return pairs;
}

CoordinatorParams train_coordinator(std::span<const ContrastiveInstance> instances, const Vocabulary& vocab,
                                    const GeneratorParams& gen, const CoordinatorConfig& cfg,
                                    const CoordinatorTraining& training, const Ranker& ranker,
                                    const std::function<void(const TrainLogRow&)>& on_step) {
  if (instances.empty()) throw std::invalid_argument("train-coordinator: no training instances");
  CoordinatorParams coord = CoordinatorParams::initialize(cfg);
  AdamW optimizer(coord.parameters(), training.optimizer);
  Rng rollout = make_stream(training.seed, "rollout");
  Rng schedule = make_stream(training.seed, "schedule");
  std::map<std::string, PrefixCache> caches;
  std::vector<std::size_t> order(instances.size());
  std::size_t cursor = order.size();
  for (std::size_t step = 0; step < training.steps; ++step) {
    if (cursor == order.size()) {
      std::iota(order.begin(), order.end(), 0);
      for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[uniform_index(schedule, i)]);
      cursor = 0;
    }
    const auto& inst = instances[order[cursor++]];
    auto it = caches.try_emplace(inst.id, gen, training.options.max_len).first;
    const auto r =
        train_coordinator_step(inst, vocab, gen, coord, ranker, training.options, optimizer, rollout, &it->second);
    if (on_step) {
      TrainLogRow row;
      row.step = step + 1;
      row.instance = inst.id;
      row.reward = r.reward.reward;
      row.baseline = r.reward.baseline;
      row.losses = r.losses;
      row.gate_rate = r.gate_rate;
      row.fallback_rate = r.fallback_rate;
      on_step(row);
    }
  }
  return coord;
}

std::string model_name(ModelKind kind) {
  switch (kind) {
    case ModelKind::kMscqg: return "mscqg";
    case ModelKind::kMsqg: return "msqg";
    case ModelKind::kTopTfidf: return "top-tfidf";
    case ModelKind::kTopFrequent: return "top-frequent";
    case ModelKind::kOracle: return "oracle";
  }
  return "unknown";
}

std::vector<TokenId> QuestionSource::question(const ContrastiveInstance& inst) const {
  auto need = [&](const void* p, const char* what) {
    if (p == nullptr) throw std::invalid_argument(model_name(kind) + " needs " + what);
  };
  switch (kind) {
    case ModelKind::kMscqg: {
      need(generator, "a generator");
      need(coordinator, "a coordinator");
      DecodeOptions opts;
      opts.max_len = max_len;
      opts.null_neg = null_neg;
      return decode_common(*generator, *coordinator, inst, opts).question;
    }
    case ModelKind::kMsqg:
      need(generator, "a generator");
      return msqg_decode(*generator, inst, max_len);
    case ModelKind::kTopTfidf:
      need(questions, "a question corpus");
      return tokenize(top_tfidf_at_k(inst, *questions, retrieval_depth).text, *vocab);
    case ModelKind::kTopFrequent:
      need(questions, "a question corpus");
      return tokenize(top_frequent_at_k(inst, *questions, retrieval_depth).text, *vocab);
    case ModelKind::kOracle:
      if (!inst.oracle_pos_question) throw std::invalid_argument("instance '" + inst.id + "' has no oracle question");
      return tokenize(*inst.oracle_pos_question, *vocab);
  }
  throw std::logic_error("unknown model kind");
}

EvalResult evaluate(std::span<const ContrastiveInstance> instances, const QuestionSource& source,
                    const Ranker& ranker, const InvertedIndex& index, std::size_t k) {
  if (source.vocab == nullptr) throw std::invalid_argument("evaluate: a vocabulary is required");
  EvalResult result;
  std::vector<MetricReport> outs, augs;
  for (const auto& inst : instances) {
    const auto q = source.question(inst);
    InstanceEval row;
    row.instance = inst.id;
    row.question = detokenize(q, *source.vocab);
    row.out_sample = out_sample_eval(q, inst, ranker, k);
    row.augmented = augmented_eval(q, inst, index, source.retrieval_depth, k);
    outs.push_back(row.out_sample);
    augs.push_back(row.augmented);
    result.rows.push_back(std::move(row));
  }
  result.out_sample_mean = mean_report(outs);
  result.augmented_mean = mean_report(augs);
  return result;
}

}  // namespace mscqg
