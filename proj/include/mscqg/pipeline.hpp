// End-to-end stages shared by the command-line tool and the acceptance
// suite: data preparation, generator and coordinator training, decoding and
// evaluation of every model variant.
#pragma once

#include "mscqg/coordinator.hpp"
#include "mscqg/corpus.hpp"
#include "mscqg/docgen.hpp"
#include "mscqg/objectives.hpp"
#include "mscqg/optim.hpp"
#include "mscqg/ranker.hpp"
#include "mscqg/retrieval.hpp"

#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace mscqg {

/// (document tokens, question tokens) for every document with an oracle
/// question of its own set.
std::vector<std::pair<std::vector<TokenId>, std::vector<TokenId>>> generator_pairs(
    std::span<const ContrastiveInstance> instances, const Vocabulary& vocab);

struct TrainLogRow {
  std::size_t step = 0;
  std::string instance;
  double reward = 0.0;
  double baseline = 0.0;
  LossBreakdown losses;
  double gate_rate = 0.0;
  double fallback_rate = 0.0;
};

struct CoordinatorTraining {
  std::size_t steps = 2000;
  AdamWConfig optimizer;
  TrainOptions options;
  std::uint64_t seed = 0;
};

/// Cycles through the instances in a seeded order, one rollout per step.
CoordinatorParams train_coordinator(std::span<const ContrastiveInstance> instances, const Vocabulary& vocab,
                                    const GeneratorParams& gen, const CoordinatorConfig& cfg,
                                    const CoordinatorTraining& training, const Ranker& ranker,
                                    const std::function<void(const TrainLogRow&)>& on_step = {});

enum class ModelKind { kMscqg, kMsqg, kTopTfidf, kTopFrequent, kOracle };

std::string model_name(ModelKind kind);

/// Produces one question per instance with the requested model.
struct QuestionSource {
  ModelKind kind = ModelKind::kMscqg;
  const GeneratorParams* generator = nullptr;
  const CoordinatorParams* coordinator = nullptr;
  const QuestionCorpus* questions = nullptr;
  const Vocabulary* vocab = nullptr;
  bool null_neg = false;
  std::size_t max_len = 20;
  std::size_t retrieval_depth = 100;

  [[nodiscard]] std::vector<TokenId> question(const ContrastiveInstance& inst) const;
};

struct InstanceEval {
  std::string instance;
  std::string question;
  MetricReport out_sample;
  MetricReport augmented;
};

struct EvalResult {
  std::vector<InstanceEval> rows;
  MetricReport out_sample_mean;
  MetricReport augmented_mean;
};

EvalResult evaluate(std::span<const ContrastiveInstance> instances, const QuestionSource& source,
                    const Ranker& ranker, const InvertedIndex& index, std::size_t k = 10);

}  // namespace mscqg
