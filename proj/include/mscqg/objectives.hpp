// Rewards, the policy-gradient / contrastive-regularisation / entropy losses
// over a decode trace, and one coordinator training step.
#pragma once

#include "mscqg/autograd.hpp"
#include "mscqg/coordinator.hpp"
#include "mscqg/optim.hpp"
#include "mscqg/ranker.hpp"

#include <optional>
#include <span>
#include <vector>

namespace mscqg {

enum class RewardStatistic { kPrecisionAtK, kMap };
enum class Critic { kOracle, kSelf };

struct RewardSpec {
  RewardStatistic statistic = RewardStatistic::kPrecisionAtK;
  std::size_t k = 10;
  Critic critic = Critic::kOracle;
};

/// Statistic of a ranked pos/neg label list.
double compute_reward(const std::vector<bool>& ranked_labels, const RewardSpec& spec);

struct RewardRecord {
  double reward = 0.0;
  double baseline = 0.0;
  std::vector<double> scores;  // ranker scores of the sampled question, instance order (pos then neg)
};

struct ScrStepRecord {
  double l_pos = 0.0;
  double l_neg = 0.0;
  double nu = 0.0;
  bool gate_active = false;
};

inline constexpr double kScrFloor = 1e-8;

struct LossWeights {
  double pg = 1.0;
  double scr = 100.0;
  double entropy = 0.1;
};

struct LossBreakdown {
  double pg = 0.0;
  double scr = 0.0;
  double entropy = 0.0;
  double total = 0.0;
  LossWeights weights;
};

LossBreakdown total_loss(double pg, double scr, double entropy, const LossWeights& weights = {});

/// -(R - R_baseline) * sum_t log pi(o_t); throws if a chosen token had no mass.
double pg_loss(const DecodeTrace& trace, const RewardRecord& reward);

struct ScrResult {
  double value = 0.0;
  std::vector<ScrStepRecord> steps;
};
ScrResult scr_loss(const DecodeTrace& trace);

/// Mean over steps of sum w log w + sum v log v.
double entropy_loss(const DecodeTrace& trace);

/// Cosine similarity of the mean positive and mean negative distributions;
/// 0 when there are no negatives.
double set_similarity(const Matrix& pos_dists, const Matrix& neg_dists);

/// All three losses rebuilt on a tape from the coordinator parameters and the
/// recorded trace (generator outputs, chosen tokens, truncation masks). When
/// `fixed_gates` is non-empty it replaces the per-step SCR gate.
struct RolloutGraph {
  ag::Var pg, scr, entropy, total;
  std::vector<ScrStepRecord> scr_steps;
};
RolloutGraph rollout_graph(ag::Tape& tape, const CoordinatorParams& coord, const DecodeTrace& trace, double advantage,
                           const LossWeights& weights, std::span<const bool> fixed_gates = {});

struct TrainOptions {
  RewardSpec reward;
  LossWeights weights;
  bool null_neg = false;
  double temperature = 1.0;
  std::size_t max_len = 20;
};

struct TrainStepResult {
  LossBreakdown losses;
  RewardRecord reward;
  std::vector<ScrStepRecord> scr_steps;
  double gate_rate = 0.0;
  double fallback_rate = 0.0;
  std::vector<TokenId> question;
};

/// Samples one rollout, scores it against the critic baseline and applies one
/// optimiser update to the coordinator. The generator is only read.
TrainStepResult train_coordinator_step(const ContrastiveInstance& inst, const Vocabulary& vocab,
                                       const GeneratorParams& gen, CoordinatorParams& coord, const Ranker& ranker,
                                       const TrainOptions& options, AdamW& optimizer, Rng& rng,
                                       PrefixCache* cache = nullptr);

}  // namespace mscqg
