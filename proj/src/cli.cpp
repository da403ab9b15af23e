#include "mscqg/cli.hpp"

#include "mscqg/checkpoint.hpp"
#include "mscqg/config.hpp"
#include "mscqg/pipeline.hpp"
#include "mscqg/textmetrics.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <fstream>
#include <iomanip>
#include <memory>
#include <sstream>

namespace mscqg {

namespace {

namespace fs = std::filesystem;

// Raised when an earlier stage has not been run.
class MissingPrerequisite : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string fixed(double v) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(6) << v;
  return os.str();
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) out += c == '"' ? std::string("\"\"") : std::string(1, c);
  return out + "\"";
}

void write_file(const fs::path& path, const std::string& content) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << content;
}

void require_file(const fs::path& path, const std::string& hint) {
  if (!fs::exists(path)) throw MissingPrerequisite(path.string() + " not found; " + hint);
}

nlohmann::json report_json(const MetricReport& r) {
  return {{"map", r.map}, {"rprec", r.rprec}, {"mrr", r.mrr}, {"mrr10", r.mrr10},
          {"ndcg", r.ndcg}, {"p_at_k", r.p_at_k}, {"k", r.k}};
}

// Dataset, vocabulary and the trained models a command may need.
struct Workspace {
  const RunConfig& cfg;
  std::ostream& log;
  std::optional<Vocabulary> vocab;
  std::vector<ContrastiveInstance> all;
  std::optional<GeneratorParams> generator;
  std::optional<CoordinatorParams> coordinator;
  std::unique_ptr<Ranker> ranker;
  std::optional<InvertedIndex> index;
  std::optional<QuestionCorpus> questions;

  Workspace(const RunConfig& c, std::ostream& l) : cfg(c), log(l) {}

  std::span<const ContrastiveInstance> train() const { return std::span(all).first(cfg.train_pairs); }
  std::span<const ContrastiveInstance> test() const { return std::span(all).subspan(cfg.train_pairs); }
  std::span<const ContrastiveInstance> split() const {
    if (cfg.split == "train") return train();
    if (cfg.split == "test") return test();
    return all;
  }

  void load_generator() {
    require_file(cfg.generator_path(), "run 'train-generator' first");
    auto ck = load_checkpoint(cfg.generator_path());
    if (!ck.generator || !ck.vocab) {
      throw std::runtime_error(cfg.generator_path().string() + " lacks a generator or vocabulary section");
    }
    generator = std::move(*ck.generator);
    vocab = std::move(*ck.vocab);
  }

  void load_coordinator() {
    require_file(cfg.coordinator_path(), "run 'train-coordinator' with coordinator_name = " + cfg.coordinator_name);
    auto ck = load_checkpoint(cfg.coordinator_path());
    if (!ck.coordinator) throw std::runtime_error(cfg.coordinator_path().string() + " lacks a coordinator section");
    coordinator = std::move(*ck.coordinator);
  }

  // The vocabulary of the generator checkpoint when there is one, otherwise
  // the same construction train-generator uses.
  void load_data(bool need_generator) {
    require_file(cfg.dataset_path(), "run 'gen-data' first");
    all = load_dataset(cfg.dataset_path());
    if (all.size() != cfg.data.num_pairs) {
      throw std::runtime_error(cfg.dataset_path().string() + " holds " + std::to_string(all.size()) +
                               " instances but data.num_pairs = " + std::to_string(cfg.data.num_pairs));
    }
    if (need_generator || fs::exists(cfg.generator_path())) {
      load_generator();
    } else {
      require_file(cfg.pretrain_path(), "run 'gen-data' first");
      vocab = cfg.build_vocabulary(all, load_dataset(cfg.pretrain_path()));
    }
    assign_tokens(all, *vocab);
    if (cfg.ranker == RankerKind::kBm25) {
      ranker = std::make_unique<Bm25Ranker>(CorpusStats::build(std::span<const ContrastiveInstance>(all)), cfg.bm25);
    } else {
      ranker = std::make_unique<ConstantRanker>(cfg.constant_score);
    }
    index = index_documents(all, cfg.bm25.bm25);
  }

  void load_questions() {
    require_file(cfg.questions_path(), "run 'gen-data' first");
    questions.emplace(mscqg::load_questions(cfg.questions_path()), *vocab, cfg.bm25.bm25);
  }

  QuestionSource source(ModelKind kind) {
    QuestionSource s;
    s.kind = kind;
    s.vocab = &*vocab;
    s.null_neg = cfg.null_neg;
    s.max_len = cfg.coordinator.max_length;
    s.retrieval_depth = cfg.retrieval_depth;
    if (generator) s.generator = &*generator;
    if (coordinator) s.coordinator = &*coordinator;
    if (questions) s.questions = &*questions;
    return s;
  }
};

bool needs_generator(ModelKind k) { return k == ModelKind::kMscqg || k == ModelKind::kMsqg; }

Workspace open_for_model(const RunConfig& cfg, ModelKind kind, std::ostream& log) {
  Workspace ws(cfg, log);
  ws.load_data(needs_generator(kind));
  if (kind == ModelKind::kMscqg) ws.load_coordinator();
  if (kind == ModelKind::kTopTfidf || kind == ModelKind::kTopFrequent) ws.load_questions();
  return ws;
}

void cmd_gen_data(const RunConfig& cfg, std::ostream& log) {
  const SyntheticSpec data = cfg.data_spec();
  const SyntheticSpec pre = cfg.pretrain_spec();
  const auto main = generate_synthetic(data);
  write_dataset(cfg.dataset_path(), main.instances);
  write_questions(cfg.questions_path(), main.questions);
  write_dataset(cfg.pretrain_path(), generate_synthetic(pre).instances);
  log << "wrote " << main.instances.size() << " instances, " << main.questions.size() << " questions and "
      << pre.num_pairs << " pre-training pairs to " << cfg.data_dir.string() << "\n";
}

void cmd_train_generator(const RunConfig& cfg, std::ostream& log) {
  require_file(cfg.dataset_path(), "run 'gen-data' first");
  require_file(cfg.pretrain_path(), "run 'gen-data' first");
  const auto data = load_dataset(cfg.dataset_path());
  auto pre = load_dataset(cfg.pretrain_path());
  const Vocabulary vocab = cfg.build_vocabulary(data, pre);
  assign_tokens(pre, vocab);
  const GeneratorConfig gc = cfg.generator_config(vocab.size());
  const auto pairs = generator_pairs(pre, vocab);
  log << "training the generator on " << pairs.size() << " pairs, vocabulary " << vocab.size() << "\n";
  auto gen = train_generator(pairs, gc);
  save_checkpoint(cfg.generator_path(), Checkpoint{vocab, gen, std::nullopt});
  std::string csv = "epoch,loss\n";
  for (std::size_t e = 0; e < gen.epoch_losses.size(); ++e) {
    csv += std::to_string(e + 1) + "," + fixed(gen.epoch_losses[e]) + "\n";
  }
  write_file(cfg.report_dir() / "generator_log.csv", csv);
  log << "final loss " << fixed(gen.final_loss) << ", saved " << cfg.generator_path().string() << "\n";
}

void cmd_train_coordinator(const RunConfig& cfg, std::ostream& log) {
  Workspace ws(cfg, log);
  ws.load_data(true);
  const CoordinatorConfig cc = cfg.coordinator_config();
  std::string csv = "step,instance,reward,baseline,pg,scr,entropy,total,gate_rate,fallback_rate\n";
  const std::size_t every = std::max<std::size_t>(1, cfg.coordinator_steps / 10);
  double recent = 0.0;
  auto on_step = [&](const TrainLogRow& r) {
    csv += std::to_string(r.step) + "," + csv_field(r.instance) + "," + fixed(r.reward) + "," + fixed(r.baseline) +
           "," + fixed(r.losses.pg) + "," + fixed(r.losses.scr) + "," + fixed(r.losses.entropy) + "," +
           fixed(r.losses.total) + "," + fixed(r.gate_rate) + "," + fixed(r.fallback_rate) + "\n";
    recent += r.reward;
    if (r.step % every == 0) {
      log << "step " << r.step << "/" << cfg.coordinator_steps << " mean reward " << fixed(recent / every) << "\n";
      recent = 0.0;
    }
  };
  const auto coord = train_coordinator(ws.train(), *ws.vocab, *ws.generator, cc, cfg.coordinator_training(),
                                       *ws.ranker, on_step);
  save_checkpoint(cfg.coordinator_path(), Checkpoint{std::nullopt, std::nullopt, coord});
  write_file(cfg.report_dir() / "training_log.csv", csv);
  log << "saved " << cfg.coordinator_path().string() << "\n";
}

void cmd_generate(const RunConfig& cfg, std::ostream& out, std::ostream& log) {
  auto ws = open_for_model(cfg, cfg.model, log);
  const auto src = ws.source(cfg.model);
  std::string csv = "instance,model,question\n";
  for (const auto& inst : ws.split()) {
    const auto q = detokenize(src.question(inst), *ws.vocab);
    csv += csv_field(inst.id) + "," + model_name(cfg.model) + "," + csv_field(q) + "\n";
    out << inst.id << "\t" << q << "\n";
  }
  write_file(cfg.report_dir() / "questions.csv", csv);
}

void cmd_eval_retrieval(const RunConfig& cfg, ModelKind kind, std::ostream& out, std::ostream& log) {
  auto ws = open_for_model(cfg, kind, log);
  const auto result = evaluate(ws.split(), ws.source(kind), *ws.ranker, *ws.index, cfg.eval_k);
  const std::string name = model_name(kind);
  std::string csv = "model,protocol,instance,map,rprec,mrr,mrr10,ndcg,p_at_k\n";
  auto row = [&](const std::string& protocol, const std::string& inst, const MetricReport& r) {
    csv += name + "," + protocol + "," + csv_field(inst) + "," + fixed(r.map) + "," + fixed(r.rprec) + "," +
           fixed(r.mrr) + "," + fixed(r.mrr10) + "," + fixed(r.ndcg) + "," + fixed(r.p_at_k) + "\n";
  };
  row("out-sample", "mean", result.out_sample_mean);
  row("augmented", "mean", result.augmented_mean);
  nlohmann::json instances = nlohmann::json::array();
  for (const auto& r : result.rows) {
    row("out-sample", r.instance, r.out_sample);
    row("augmented", r.instance, r.augmented);
    instances.push_back({{"instance", r.instance},
                         {"question", r.question},
                         {"out_sample", report_json(r.out_sample)},
                         {"augmented", report_json(r.augmented)}});
  }
  nlohmann::json j = {{"run_id", cfg.run_id},
                      {"model", name},
                      {"split", cfg.split},
                      {"num_instances", result.rows.size()},
                      {"out_sample", report_json(result.out_sample_mean)},
                      {"augmented", report_json(result.augmented_mean)},
                      {"instances", instances}};
  write_file(cfg.report_dir() / "metrics.csv", csv);
  write_file(cfg.report_dir() / "metrics.json", j.dump(2) + "\n");
  const auto& m = result.out_sample_mean;
  const auto& a = result.augmented_mean;
  out << name << " (" << cfg.split << ", " << result.rows.size() << " instances)\n"
      << "  out-sample  mAP " << fixed(m.map) << "  RPrec " << fixed(m.rprec) << "  MRR " << fixed(m.mrr)
      << "  MRR@10 " << fixed(m.mrr10) << "  nDCG " << fixed(m.ndcg) << "  P@" << m.k << " " << fixed(m.p_at_k)
      << "\n"
      << "  augmented   mAP " << fixed(a.map) << "  RPrec " << fixed(a.rprec) << "  MRR " << fixed(a.mrr)
      << "  MRR@10 " << fixed(a.mrr10) << "  nDCG " << fixed(a.ndcg) << "  P@" << a.k << " " << fixed(a.p_at_k)
      << "\n";
}

void cmd_eval_text(const RunConfig& cfg, std::ostream& out, std::ostream& log) {
  auto ws = open_for_model(cfg, cfg.model, log);
  const auto src = ws.source(cfg.model);
  std::string csv = "instance,model,BL-1,BL-2,BL-3,BL-4,ROUGE_L\n";
  std::array<double, 5> sum{};
  std::size_t n = 0;
  for (const auto& inst : ws.split()) {
    if (!inst.oracle_pos_question) continue;
    const auto ref = tokenize(*inst.oracle_pos_question, *ws.vocab);
    if (ref.empty()) continue;
    const auto hyp = src.question(inst);
    std::array<double, 5> s{};
    for (int k = 1; k <= 4; ++k) s[k - 1] = bleu(hyp, ref, k);
    s[4] = rouge_l(hyp, ref);
    csv += csv_field(inst.id) + "," + model_name(cfg.model);
    for (std::size_t i = 0; i < 5; ++i) {
      csv += "," + fixed(s[i]);
      sum[i] += s[i];
    }
    csv += "\n";
    ++n;
  }
  if (n == 0) throw std::runtime_error("no instance in split '" + cfg.split + "' has an oracle question");
  csv += "mean," + model_name(cfg.model);
  for (double s : sum) csv += "," + fixed(s / static_cast<double>(n));
  csv += "\n";
  write_file(cfg.report_dir() / "text_metrics.csv", csv);
  out << model_name(cfg.model) << " BL-1 " << fixed(sum[0] / n) << " BL-2 " << fixed(sum[1] / n) << " BL-3 "
      << fixed(sum[2] / n) << " BL-4 " << fixed(sum[3] / n) << " ROUGE_L " << fixed(sum[4] / n) << "\n";
}

void cmd_inspect_weights(const RunConfig& cfg, const std::string& instance, std::ostream& out, std::ostream& log) {
  auto ws = open_for_model(cfg, ModelKind::kMscqg, log);
  std::string csv = "instance,step,token,z,eta,set,doc,weight\n";
  std::size_t found = 0;
  for (const auto& inst : ws.split()) {
    if (!instance.empty() && inst.id != instance) continue;
    ++found;
    DecodeOptions opts;
    opts.max_len = cfg.coordinator.max_length;
    opts.null_neg = cfg.null_neg;
    const auto trace = decode_common(*ws.generator, *ws.coordinator, inst, opts);
    for (std::size_t t = 0; t < trace.steps.size(); ++t) {
      const auto& s = trace.steps[t];
      const std::string token = s.token == kEos ? "<eos>" : ws.vocab->word(s.token);
      const std::string head = csv_field(inst.id) + "," + std::to_string(t + 1) + "," + csv_field(token) + "," +
                               fixed(s.coord.z) + "," + fixed(s.coord.eta) + ",";
      for (Eigen::Index i = 0; i < s.coord.w.size(); ++i) {
        csv += head + "positive," + csv_field(inst.positive_docs[i].id) + "," + fixed(s.coord.w(i)) + "\n";
      }
      for (Eigen::Index j = 0; j < s.coord.v.size(); ++j) {
        csv += head + "negative," + csv_field(inst.negative_docs[j].id) + "," + fixed(s.coord.v(j)) + "\n";
      }
    }
    out << inst.id << ": " << detokenize(trace.question, *ws.vocab) << "\n";
  }
  if (found == 0) throw std::runtime_error("no instance '" + instance + "' in split '" + cfg.split + "'");
  write_file(cfg.report_dir() / "weights_trace.csv", csv);
}

// Runs whatever stages the configured model still lacks, then evaluates it.
void cmd_run(const RunConfig& cfg, std::ostream& out, std::ostream& log) {
  if (!fs::exists(cfg.dataset_path()) || !fs::exists(cfg.pretrain_path()) || !fs::exists(cfg.questions_path())) {
    cmd_gen_data(cfg, log);
  }
  if (needs_generator(cfg.model) && !fs::exists(cfg.generator_path())) cmd_train_generator(cfg, log);
  if (cfg.model == ModelKind::kMscqg) cmd_train_coordinator(cfg, log);
  cmd_eval_retrieval(cfg, cfg.model, out, log);
}

struct CommonOptions {
  std::vector<std::string> config_files;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> run_id;
  std::optional<std::string> ranker;
  std::optional<std::string> critic;
  std::optional<std::string> statistic;
  std::optional<std::string> model;
  std::optional<std::string> split;
  std::optional<std::size_t> steps;
  bool null_neg = false;
  bool no_pg = false;
  bool no_scr = false;
  bool no_entropy = false;
  bool print_config = false;
};

void add_common(CLI::App* cmd, CommonOptions& o) {
  cmd->add_option("-c,--config", o.config_files, "Configuration file(s), applied in order");
  cmd->add_option("--set", o.overrides, "Override one key: --set key=value");
  cmd->add_option("--seed", o.seed, "Master seed");
  cmd->add_option("--run-id", o.run_id, "Report directory name under reports_dir");
  cmd->add_option("--ranker", o.ranker, "bm25 | mock-constant");
  cmd->add_option("--critic", o.critic, "oracle | self");
  cmd->add_option("--statistic", o.statistic, "Reward statistic: precision | map");
  cmd->add_option("--model", o.model, "mscqg | msqg | top-tfidf | top-frequent | oracle");
  cmd->add_option("--split", o.split, "train | test | all");
  cmd->add_option("--steps", o.steps, "Coordinator training steps");
  cmd->add_flag("--null-neg", o.null_neg, "Ignore the negative set while decoding");
  cmd->add_flag("--no-pg", o.no_pg, "Disable the policy-gradient loss");
  cmd->add_flag("--no-scr", o.no_scr, "Disable the contrastive regulariser");
  cmd->add_flag("--no-entropy", o.no_entropy, "Disable the entropy loss");
  cmd->add_flag("--print-config", o.print_config, "Print the effective configuration to stderr");
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw ConfigError({"cannot read config file " + p.string()});
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

RunConfig resolve_config(const CommonOptions& o) {
  RunConfig cfg;
  std::vector<std::string> problems;
  for (const auto& f : o.config_files) apply_config_text(cfg, slurp(f), f, problems);
  auto set = [&](const std::string& key, const std::string& value) {
    if (auto err = set_config_value(cfg, key, value)) problems.push_back(*err);
  };
  for (const auto& kv : o.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) {
      problems.push_back("--set expects key=value, got '" + kv + "'");
      continue;
    }
    set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (o.seed) cfg.seed = *o.seed;
  if (o.run_id) cfg.run_id = *o.run_id;
  if (o.ranker) set("ranker", *o.ranker);
  if (o.critic) set("reward.critic", *o.critic);
  if (o.statistic) set("reward.statistic", *o.statistic);
  if (o.model) set("model", *o.model);
  if (o.split) cfg.split = *o.split;
  if (o.steps) cfg.coordinator_steps = *o.steps;
  if (o.null_neg) cfg.null_neg = true;
  if (o.no_pg) cfg.enable_pg = false;
  if (o.no_scr) cfg.enable_scr = false;
  if (o.no_entropy) cfg.enable_entropy = false;
  const auto v = cfg.violations();
  problems.insert(problems.end(), v.begin(), v.end());
  if (!problems.empty()) throw ConfigError(problems);
  return cfg;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Contrastive multi-document question generation"};
  app.require_subcommand(1);
  CommonOptions opts;
  std::string baseline_kind;
  std::string instance;

  struct Command {
    CLI::App* app;
    std::function<void(const RunConfig&)> run;
  };
  std::vector<Command> commands;
  auto add = [&](const std::string& name, const std::string& help, std::function<void(const RunConfig&)> run) {
    CLI::App* c = app.add_subcommand(name, help);
    add_common(c, opts);
    commands.push_back({c, std::move(run)});
    return c;
  };
  add("gen-data", "Write the synthetic dataset, question corpus and pre-training corpus",
      [&](const RunConfig& c) { cmd_gen_data(c, err); });
  add("train-generator", "Pre-train the single-document generator",
      [&](const RunConfig& c) { cmd_train_generator(c, err); });
  add("train-coordinator", "Train the coordinator against a frozen generator",
      [&](const RunConfig& c) { cmd_train_coordinator(c, err); });
  add("generate", "Write one question per instance", [&](const RunConfig& c) { cmd_generate(c, out, err); });
  add("eval-retrieval", "Out-sample and search-engine augmented retrieval metrics",
      [&](const RunConfig& c) { cmd_eval_retrieval(c, c.model, out, err); });
  add("eval-text", "BLEU-1..4 and ROUGE-L against the oracle questions",
      [&](const RunConfig& c) { cmd_eval_text(c, out, err); });
  auto* baseline = add("baseline", "Evaluate a baseline", [&](const RunConfig& c) {
    cmd_eval_retrieval(c, parse_model_kind(baseline_kind), out, err);
  });
  baseline->add_option("kind", baseline_kind, "top-tfidf | top-frequent | msqg")
      ->required()
      ->check(CLI::IsMember({"top-tfidf", "top-frequent", "msqg"}));
  auto* inspect = add("inspect-weights", "Trace the coordinator weights and eta while decoding",
                      [&](const RunConfig& c) { cmd_inspect_weights(c, instance, out, err); });
  inspect->add_option("--instance", instance, "Only this instance id");
  add("run", "Run every missing stage for the configured model, then evaluate it",
      [&](const RunConfig& c) { cmd_run(c, out, err); });
  app.add_subcommand("show-config", "Print every configuration key with its value")->callback([] {});

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  }

  if (app.got_subcommand("show-config")) {
    out << format_config(RunConfig{});
    return kExitOk;
  }
  RunConfig cfg;
  try {
    cfg = resolve_config(opts);
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  }
  if (opts.print_config) err << format_config(cfg);
  for (const auto& c : commands) {
    if (!c.app->parsed()) continue;
    try {
      c.run(cfg);
      return kExitOk;
    } catch (const MissingPrerequisite& e) {
      err << "error: " << e.what() << "\n";
      return kExitRuntime;
    } catch (const std::exception& e) {
      err << "error: " << c.app->get_name() << ": " << e.what() << "\n";
      return kExitRuntime;
    }
  }
  return kExitUsage;
}

}  // namespace mscqg
