// Run configuration: a flat "key = value" text file plus per-key overrides.
// Every stage of the command-line tool reads its settings from here.
#pragma once

#include "mscqg/coordinator.hpp"
#include "mscqg/corpus.hpp"
#include "mscqg/docgen.hpp"
#include "mscqg/objectives.hpp"
#include "mscqg/optim.hpp"
#include "mscqg/pipeline.hpp"
#include "mscqg/ranker.hpp"

#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace mscqg {

enum class RankerKind { kBm25, kMockConstant };

struct RunConfig {
  std::uint64_t seed = 0;
  std::string run_id = "default";

  std::filesystem::path data_dir = "data";
  std::filesystem::path checkpoint_dir = "checkpoints";
  std::filesystem::path reports_dir = "reports";
  std::string coordinator_name = "coordinator";

  SyntheticSpec data = [] {
    SyntheticSpec s;
    s.num_pairs = 50;
    return s;
  }();
  std::size_t train_pairs = 40;
  /// Corpus the generator is pre-trained on. It shares the word pool of
  /// `data` but none of its topics.
  SyntheticSpec pretrain = [] {
    SyntheticSpec s;
    s.num_pairs = 2000;
    s.docs_per_set = 1;
    return s;
  }();
  std::size_t vocab_size = 20000;

  GeneratorConfig generator{.epochs = 25};
  CoordinatorConfig coordinator;
  std::size_t coordinator_steps = 2000;
  AdamWConfig coordinator_optimizer;
  double temperature = 1.0;

  LossWeights lambda;
  bool enable_pg = true;
  bool enable_scr = true;
  bool enable_entropy = true;
  bool null_neg = false;
  RewardSpec reward;

  RankerKind ranker = RankerKind::kBm25;
  Bm25RankerConfig bm25;
  double constant_score = 0.5;

  ModelKind model = ModelKind::kMscqg;
  std::string split = "test";
  std::size_t eval_k = 10;
  std::size_t retrieval_depth = 100;

  /// Evaluation data drawn with `seed`; the pre-training corpus uses the
  /// next seed for its topics and `seed` for its word pool.
  [[nodiscard]] SyntheticSpec data_spec() const;
  [[nodiscard]] SyntheticSpec pretrain_spec() const;
  /// Vocabulary over the evaluation and pre-training texts.
  [[nodiscard]] Vocabulary build_vocabulary(std::span<const ContrastiveInstance> data,
                                            std::span<const ContrastiveInstance> pretrain) const;
  [[nodiscard]] GeneratorConfig generator_config(std::size_t vocab) const;
  [[nodiscard]] CoordinatorConfig coordinator_config() const;

  /// Effective loss weights after the ablation switches.
  [[nodiscard]] LossWeights loss_weights() const;
  [[nodiscard]] TrainOptions train_options() const;
  [[nodiscard]] CoordinatorTraining coordinator_training() const;

  /// All constraint violations, empty when the configuration is usable.
  [[nodiscard]] std::vector<std::string> violations() const;

  [[nodiscard]] std::filesystem::path dataset_path() const { return data_dir / "dataset.jsonl"; }
  [[nodiscard]] std::filesystem::path questions_path() const { return data_dir / "questions.jsonl"; }
  [[nodiscard]] std::filesystem::path pretrain_path() const { return data_dir / "pretrain.jsonl"; }
  [[nodiscard]] std::filesystem::path generator_path() const { return checkpoint_dir / "generator.ckpt"; }
  [[nodiscard]] std::filesystem::path coordinator_path() const {
    return checkpoint_dir / (coordinator_name + ".ckpt");
  }
  [[nodiscard]] std::filesystem::path report_dir() const { return reports_dir / run_id; }
};

class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(std::vector<std::string> problems);
  [[nodiscard]] const std::vector<std::string>& problems() const { return problems_; }

 private:
  std::vector<std::string> problems_;
};

/// Sets one key from its textual value. Returns an error message instead of
/// throwing so that callers can gather every problem at once.
std::optional<std::string> set_config_value(RunConfig& cfg, const std::string& key, const std::string& value);

/// Applies "key = value" lines; '#' starts a comment. Collects unknown keys
/// and malformed values into `problems`.
void apply_config_text(RunConfig& cfg, const std::string& text, const std::string& source,
                       std::vector<std::string>& problems);

/// Every key with its current value, one "key = value" line each.
std::string format_config(const RunConfig& cfg);

std::vector<std::string> config_keys();

ModelKind parse_model_kind(const std::string& name);

}  // namespace mscqg
