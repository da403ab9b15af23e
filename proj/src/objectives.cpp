#include "mscqg/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace mscqg {

double compute_reward(const std::vector<bool>& ranked_labels, const RewardSpec& spec) {
  std::size_t relevant = 0;
  for (bool b : ranked_labels) relevant += b ? 1 : 0;
  if (relevant == 0) throw std::invalid_argument("reward: ranking contains no positive document");
  if (spec.statistic == RewardStatistic::kMap) {
    double sum = 0.0;
    std::size_t hits = 0;
    for (std::size_t i = 0; i < ranked_labels.size(); ++i) {
      if (ranked_labels[i]) sum += static_cast<double>(++hits) / static_cast<double>(i + 1);
    }
    return sum / static_cast<double>(relevant);
  }
  if (spec.k == 0 || spec.k > ranked_labels.size()) {
    throw std::invalid_argument("reward: K=" + std::to_string(spec.k) + " exceeds the ranking length " +
                                std::to_string(ranked_labels.size()));
  }
  std::size_t hits = 0;
  for (std::size_t i = 0; i < spec.k; ++i) hits += ranked_labels[i] ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(spec.k);
}

LossBreakdown total_loss(double pg, double scr, double entropy, const LossWeights& weights) {
  LossBreakdown b;
  b.pg = pg;
  b.scr = scr;
  b.entropy = entropy;
  b.weights = weights;
  b.total = weights.pg * pg + weights.scr * scr + weights.entropy * entropy;
  return b;
}

double set_similarity(const Matrix& pos_dists, const Matrix& neg_dists) {
  if (neg_dists.rows() == 0) return 0.0;
  const RowVector a = pos_dists.colwise().mean();
  const RowVector b = neg_dists.colwise().mean();
  const double na = a.norm(), nb = b.norm();
  if (na == 0.0 || nb == 0.0) return 0.0;
  return std::clamp(a.dot(b) / (na * nb), 0.0, 1.0);
}

namespace {

struct StepVars {
  ag::Var probs, w, v;
};

Matrix floored(const Matrix& m) {
  Matrix out = m.cwiseMax(kScrFloor);
  for (Eigen::Index r = 0; r < out.rows(); ++r) out.row(r) /= out.row(r).sum();
  return out;
}

ag::Var pg_term(ag::Tape& tape, std::span<const StepVars> vars, const DecodeTrace& trace, double advantage) {
  ag::Var sum_log = tape.constant(Matrix::Zero(1, 1));
  for (std::size_t t = 0; t < vars.size(); ++t) {
    if (!std::isfinite(trace.steps[t].log_prob)) {
      throw std::domain_error("pg loss: token at step " + std::to_string(t) + " was drawn outside the support");
    }
    sum_log = ag::add(sum_log, ag::log(ag::pick(vars[t].probs, 0, trace.steps[t].token)));
  }
  return ag::scale(sum_log, -advantage);
}

ag::Var scr_term(ag::Tape& tape, std::span<const StepVars> vars, const DecodeTrace& trace,
                 std::span<const bool> fixed_gates, std::vector<ScrStepRecord>& records) {
  if (vars.empty()) throw std::invalid_argument("scr loss: trace has no steps");
  if (!fixed_gates.empty() && fixed_gates.size() != vars.size()) {
    throw std::invalid_argument("scr loss: one fixed gate per step is required");
  }
  ag::Var total = tape.constant(Matrix::Zero(1, 1));
  for (std::size_t t = 0; t < vars.size(); ++t) {
    const DecodeStep& s = trace.steps[t];
    ag::Var q = ag::floor_renorm(vars[t].probs, kScrFloor);
    ag::Var l_pos = ag::symmetric_kl_sum(q, floored(s.pos_dists));
    ScrStepRecord rec;
    rec.l_pos = l_pos.scalar();
    ag::Var step = l_pos;
    if (s.neg_dists.rows() > 0) {
      ag::Var l_neg = ag::symmetric_kl_sum(q, floored(s.neg_dists));
      rec.l_neg = l_neg.scalar();
      rec.nu = set_similarity(s.pos_dists, s.neg_dists);
      rec.gate_active = fixed_gates.empty() ? rec.nu * rec.l_neg > rec.l_pos : fixed_gates[t];
      if (rec.gate_active) step = ag::sub(step, l_neg);
    }
    records.push_back(rec);
    total = ag::add(total, step);
  }
  return ag::scale(total, 1.0 / static_cast<double>(vars.size()));
}

ag::Var entropy_term(ag::Tape& tape, std::span<const StepVars> vars) {
  ag::Var total = tape.constant(Matrix::Zero(1, 1));
  for (const auto& v : vars) {
    total = ag::add(total, ag::neg_entropy(v.w));
    if (v.v.valid()) total = ag::add(total, ag::neg_entropy(v.v));
  }
  return vars.empty() ? total : ag::scale(total, 1.0 / static_cast<double>(vars.size()));
}

std::vector<StepVars> constant_vars(ag::Tape& tape, const DecodeTrace& trace) {
  std::vector<StepVars> out;
  for (const auto& s : trace.steps) {
    StepVars v;
    v.probs = tape.constant(s.agg.probs);
    v.w = tape.constant(s.coord.w);
    if (s.coord.v.size() > 0) v.v = tape.constant(s.coord.v);
    out.push_back(v);
  }
  return out;
}

}  // namespace

double pg_loss(const DecodeTrace& trace, const RewardRecord& reward) {
  ag::Tape tape;
  const auto vars = constant_vars(tape, trace);
  return pg_term(tape, vars, trace, reward.reward - reward.baseline).scalar();
}

ScrResult scr_loss(const DecodeTrace& trace) {
  ag::Tape tape;
  const auto vars = constant_vars(tape, trace);
  ScrResult r;
  r.value = scr_term(tape, vars, trace, {}, r.steps).scalar();
  return r;
}

double entropy_loss(const DecodeTrace& trace) {
  ag::Tape tape;
  const auto vars = constant_vars(tape, trace);
  return entropy_term(tape, vars).scalar();
}

RolloutGraph rollout_graph(ag::Tape& tape, const CoordinatorParams& coord, const DecodeTrace& trace, double advantage,
                           const LossWeights& weights, std::span<const bool> fixed_gates) {
  const auto membership = trace.membership();
  std::vector<StepVars> vars;
  for (const auto& s : trace.steps) {
    const auto cv = coordinator_graph(tape, coord, s.hidden, membership);
    StepVars v;
    v.probs = aggregate_graph(cv, s.pos_dists, s.neg_dists, s.agg.keep, s.agg.fallback_used);
    v.w = cv.w;
    v.v = cv.v;
    vars.push_back(v);
  }
  RolloutGraph g;
  g.pg = pg_term(tape, vars, trace, advantage);
  g.scr = scr_term(tape, vars, trace, fixed_gates, g.scr_steps);
  g.entropy = entropy_term(tape, vars);
  g.total = ag::add(ag::add(ag::scale(g.pg, weights.pg), ag::scale(g.scr, weights.scr)),
                    ag::scale(g.entropy, weights.entropy));
  return g;
}

namespace {

RewardRecord score_question(std::span<const TokenId> question, const ContrastiveInstance& inst, const Ranker& ranker,
                            const RewardSpec& spec) {
  RewardRecord r;
  for (const auto& d : inst.positive_docs) r.scores.push_back(ranker.score(d, question));
  for (const auto& d : inst.negative_docs) r.scores.push_back(ranker.score(d, question));
  r.reward = compute_reward(ranked_labels(rank_instance(question, inst, ranker)), spec);
  return r;
}

}  // namespace

TrainStepResult train_coordinator_step(const ContrastiveInstance& inst, const Vocabulary& vocab,
                                       const GeneratorParams& gen, CoordinatorParams& coord, const Ranker& ranker,
                                       const TrainOptions& options, AdamW& optimizer, Rng& rng, PrefixCache* cache) {
  if (options.reward.critic == Critic::kOracle && !inst.oracle_pos_question) {
    throw std::invalid_argument("train: oracle critic needs an oracle positive question for instance '" + inst.id +
                                "'");
  }
  DecodeOptions sample;
  sample.max_len = options.max_len;
  sample.sample = true;
  sample.temperature = options.temperature;
  sample.rng = &rng;
  sample.null_neg = options.null_neg;
  const DecodeTrace trace = decode_common(gen, coord, inst, sample, cache);

  TrainStepResult out;
  out.question = trace.question;
  out.reward = score_question(trace.question, inst, ranker, options.reward);
  if (options.reward.critic == Critic::kOracle) {
    const auto oracle = tokenize(*inst.oracle_pos_question, vocab);
    out.reward.baseline = compute_reward(ranked_labels(rank_instance(oracle, inst, ranker)), options.reward);
  } else {
    DecodeOptions greedy = sample;
    greedy.sample = false;
    greedy.rng = nullptr;
    const DecodeTrace g = decode_common(gen, coord, inst, greedy, cache);
    out.reward.baseline = compute_reward(ranked_labels(rank_instance(g.question, inst, ranker)), options.reward);
  }

  ag::Tape tape;
  const double advantage = out.reward.reward - out.reward.baseline;
  const RolloutGraph g = rollout_graph(tape, coord, trace, advantage, options.weights);
  tape.backward(g.total);
  std::vector<Matrix> grads;
  for (const Parameter* p : coord.parameters()) grads.push_back(tape.grad_of(*p));
  optimizer.step(grads);

  out.losses = total_loss(g.pg.scalar(), g.scr.scalar(), g.entropy.scalar(), options.weights);
  out.scr_steps = g.scr_steps;
  std::size_t gates = 0, fallbacks = 0;
  for (const auto& r : g.scr_steps) gates += r.gate_active ? 1 : 0;
  for (const auto& s : trace.steps) fallbacks += s.agg.fallback_used ? 1 : 0;
  out.gate_rate = static_cast<double>(gates) / static_cast<double>(trace.length());
  out.fallback_rate = static_cast<double>(fallbacks) / static_cast<double>(trace.length());
  return out;
}

}  // namespace mscqg
