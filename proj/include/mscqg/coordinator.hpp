// Inter-document coordinator: a set transformer (no causal mask, no
// positional embeddings) over the per-document generator hidden states.
// It emits attention weights over the positive and negative documents and a
// scalar z that sets the damped penalty eta(z) applied to the negative mix.
#pragma once

#include "mscqg/autograd.hpp"
#include "mscqg/corpus.hpp"
#include "mscqg/docgen.hpp"
#include "mscqg/rng.hpp"

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace mscqg {

struct CoordinatorConfig {
  std::size_t hidden = 64;
  std::size_t blocks = 2;
  std::size_t heads = 4;
  double layer_norm_eps = 1e-5;
  double init_std = 0.02;
  std::size_t max_length = 20;
  std::uint64_t seed = 0;

  void validate() const;
};

struct CoordinatorBlock {
  Parameter wq, bq, wk, bk, wv, bv, wo, bo;
  Parameter ln1_gain, ln1_bias;
  Parameter w_up, b_up, w_down, b_down;
  Parameter ln2_gain, ln2_bias;
};

struct CoordinatorParams {
  CoordinatorConfig config;
  Parameter cluster;  // 2 x H: row 0 positive set, row 1 negative set
  std::vector<CoordinatorBlock> blocks;
  Parameter head_w, head_w_bias;  // H x 1, 1 x 1
  Parameter head_v, head_v_bias;
  Parameter head_z, head_z_bias;

  static CoordinatorParams initialize(const CoordinatorConfig& cfg);

  /// Checkpoint order: cluster, per block (wq, bq, wk, bk, wv, bv, wo, bo,
  /// ln1 gain, ln1 bias, w_up, b_up, w_down, b_down, ln2 gain, ln2 bias),
  /// head_w, head_w_bias, head_v, head_v_bias, head_z, head_z_bias.
  std::vector<Parameter*> parameters();
  std::vector<const Parameter*> parameters() const;
};

enum class Membership : std::uint8_t { kPositive = 0, kNegative = 1 };

struct CoordinatorStepOutput {
  RowVector w;  // over positive positions, in input order
  RowVector v;  // over negative positions; empty when there are none
  double z = 0.0;
  double eta = 0.0;
};

/// Damped penalisation coefficient -(e^{2z} - 0.5) / (e^{2z} + 1), evaluated
/// as 1.5 * sigmoid(-2z) - 1 and kept strictly inside (-1, 0.5).
double eta(double z);
double eta_derivative(double z);

/// Graph handles for one coordinator evaluation. `v` is invalid when the
/// input has no negative positions.
struct CoordinatorVars {
  ag::Var w, v, z, eta;
};

CoordinatorVars coordinator_graph(ag::Tape& tape, const CoordinatorParams& params, const Matrix& hidden,
                                  std::span<const Membership> membership);

CoordinatorStepOutput coordinator_forward(const CoordinatorParams& params, const Matrix& hidden,
                                          std::span<const Membership> membership);

struct AggregatedDistribution {
  RowVector probs;
  double normalizer = 0.0;  // surviving mass C before normalisation
  RowVector keep;           // 1 where the weighted mix was positive, else 0
  bool fallback_used = false;
};

/// Contrastive mix: [sum_i w_i pi_i - eta * sum_j v_j pi_j]_+ / C. Falls back
/// to the positive mix when C <= 1e-12.
AggregatedDistribution aggregate(const CoordinatorStepOutput& step, const Matrix& pos_dists, const Matrix& neg_dists);

inline constexpr double kFallbackThreshold = 1e-12;

/// The same mix on a tape with the truncation mask and fallback branch held
/// at the given forward values.
ag::Var aggregate_graph(const CoordinatorVars& vars, const Matrix& pos_dists, const Matrix& neg_dists,
                        const RowVector& keep, bool fallback_used);

struct DecodeStep {
  Matrix pos_dists;  // P x V
  Matrix neg_dists;  // N x V (N = 0 under null-neg)
  Matrix hidden;     // (P + N) x H, positives first
  CoordinatorStepOutput coord;
  AggregatedDistribution agg;
  TokenId token = kEos;
  double log_prob = 0.0;
};

struct DecodeTrace {
  std::vector<DecodeStep> steps;
  std::vector<TokenId> question;  // emitted tokens without the final EOS

  [[nodiscard]] std::size_t length() const { return steps.size(); }
  /// Membership of the hidden-state rows: P positives then N negatives.
  [[nodiscard]] std::vector<Membership> membership() const;
};

struct DecodeOptions {
  std::size_t max_len = 20;
  bool sample = false;
  double temperature = 1.0;
  Rng* rng = nullptr;  // required when sampling
  bool null_neg = false;
  /// Overrides used for degenerate-case checks.
  bool force_uniform_weights = false;
  std::optional<double> force_eta;
};

/// Generator streams primed with "[document, SEP]", keyed by document id.
class PrefixCache {
 public:
  PrefixCache(const GeneratorParams& gen, std::size_t max_len) : gen_(&gen), max_len_(max_len) {}
  const GeneratorStream& get(const Document& doc);

 private:
  const GeneratorParams* gen_;
  std::size_t max_len_;
  std::map<std::string, GeneratorStream> streams_;
};

DecodeTrace decode_common(const GeneratorParams& gen, const CoordinatorParams& coord, const ContrastiveInstance& inst,
                          const DecodeOptions& options, PrefixCache* cache = nullptr);

/// Chooses the next token: argmax with lowest-id ties, or a draw from the
/// tempered distribution restricted to its support.
TokenId choose_token(const RowVector& probs, const DecodeOptions& options);

}  // namespace mscqg
