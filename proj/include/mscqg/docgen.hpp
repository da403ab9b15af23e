// Document-specific generator: a small pre-norm causal transformer language
// model fine-tuned on "[document] SEP [question] EOS" sequences. It is frozen
// once trained; the coordinator only reads its hidden states and next-token
// distributions.
#pragma once

#include "mscqg/autograd.hpp"
#include "mscqg/corpus.hpp"

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace mscqg {

struct GeneratorConfig {
  std::size_t vocab_size = 0;  // taken from the vocabulary at training time
  std::size_t hidden = 64;
  std::size_t layers = 2;
  std::size_t heads = 4;
  std::size_t max_context = 64;
  double learning_rate = 1e-3;
  double weight_decay = 0.01;
  std::size_t epochs = 30;
  std::size_t batch_size = 8;
  std::uint64_t seed = 0;
  double init_std = 0.02;
  double layer_norm_eps = 1e-5;

  /// Throws std::invalid_argument listing the first violated constraint.
  void validate() const;
};

struct GeneratorLayer {
  Parameter ln1_gain, ln1_bias;
  Parameter wq, bq, wk, bk, wv, bv, wo, bo;
  Parameter ln2_gain, ln2_bias;
  Parameter w_up, b_up, w_down, b_down;
};

/// Weights of the generator. The output head is tied to the token embedding
/// and has its own bias.
struct GeneratorParams {
  GeneratorConfig config;
  Parameter token_embedding;     // V x H
  Parameter position_embedding;  // max_context x H
  std::vector<GeneratorLayer> layers;
  Parameter final_gain, final_bias;
  Parameter output_bias;  // 1 x V

  /// Mean per-token training loss of each epoch, oldest first.
  std::vector<double> epoch_losses;
  double final_loss = 0.0;
  std::size_t truncated_sequences = 0;

  /// Fresh parameters with truncated-normal weights.
  static GeneratorParams initialize(const GeneratorConfig& cfg);

  /// All tensors in checkpoint order: token embedding, position embedding,
  /// then per layer (ln1 gain, ln1 bias, wq, bq, wk, bk, wv, bv, wo, bo,
  /// ln2 gain, ln2 bias, w_up, b_up, w_down, b_down), final gain, final bias,
  /// output bias.
  std::vector<Parameter*> parameters();
  std::vector<const Parameter*> parameters() const;
};

struct GeneratorStepOutput {
  RowVector hidden;  // final-layer state (after the final norm) at the last position
  RowVector dist;    // next-token distribution over the vocabulary
};

/// Incremental inference with cached keys and values. Pushing tokens one at
/// a time yields exactly the same states as a full forward pass.
class GeneratorStream {
 public:
  explicit GeneratorStream(const GeneratorParams& params);

  /// Appends tokens without computing the output distribution.
  void extend(std::span<const TokenId> tokens);
  /// Appends one token and returns the output at the new last position.
  GeneratorStepOutput push(TokenId token);
  /// Output at the current last position.
  [[nodiscard]] GeneratorStepOutput output() const;
  [[nodiscard]] std::size_t length() const { return length_; }

 private:
  void append(TokenId token);

  const GeneratorParams* params_;
  std::vector<Matrix> keys_;    // per layer, max_context x H
  std::vector<Matrix> values_;  // per layer, max_context x H
  RowVector last_;              // final-normed state of the last position
  std::size_t length_ = 0;
};

/// Full forward pass over `context`; throws when the context is empty or
/// longer than max_context.
GeneratorStepOutput generator_step(const GeneratorParams& params, std::span<const TokenId> context);

/// Training sequence: truncated document, SEP, question, EOS. `first_target`
/// is the index of SEP; the loss covers predictions made from SEP onward.
struct TrainingSequence {
  std::vector<TokenId> tokens;
  std::size_t first_target = 0;
  bool truncated = false;
};

TrainingSequence make_training_sequence(std::span<const TokenId> doc, std::span<const TokenId> question,
                                        std::size_t max_context);

/// [document suffix, SEP] leaving room for `max_len` generated tokens.
std::vector<TokenId> decode_prefix(std::span<const TokenId> doc, std::size_t max_context, std::size_t max_len);

/// Summed cross-entropy of the question part of `seq`, recorded on `tape`.
ag::Var sequence_loss(ag::Tape& tape, const GeneratorParams& params, const TrainingSequence& seq);

/// Fine-tunes a fresh generator. Pairs are (document tokens, question tokens).
GeneratorParams train_generator(std::span<const std::pair<std::vector<TokenId>, std::vector<TokenId>>> pairs,
                                GeneratorConfig cfg);

/// Greedy decoding from [doc, SEP] until EOS or `max_len` tokens. The EOS
/// token is not included in the result.
std::vector<TokenId> generate_single(const GeneratorParams& params, std::span<const TokenId> doc,
                                     std::size_t max_len);

/// Index of the largest entry; ties go to the lowest index.
std::size_t argmax_lowest(std::span<const double> values);

}  // namespace mscqg
