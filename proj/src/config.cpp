#include "mscqg/config.hpp"

#include <charconv>
#include <cmath>
#include <functional>
#include <sstream>

namespace mscqg {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::string format_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

template <typename T>
std::optional<T> parse_number(const std::string& s) {
  T v{};
  const auto* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc() || ptr != end) return std::nullopt;
  return v;
}

std::optional<double> parse_double(const std::string& s) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) return std::nullopt;
    return v;
  } catch (const std::exception&) {
    return std::nullopt;
  }
}

std::optional<bool> parse_bool(const std::string& s) {
  if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
  if (s == "false" || s == "0" || s == "no" || s == "off") return false;
  return std::nullopt;
}

using Setter = std::function<std::optional<std::string>(RunConfig&, const std::string&)>;
using Getter = std::function<std::string(const RunConfig&)>;

struct Field {
  std::string key;
  Setter set;
  Getter get;
};

template <typename T>
Field size_field(std::string key, T RunConfig::*member) {
  return {key,
          [member](RunConfig& c, const std::string& v) -> std::optional<std::string> {
            const auto n = parse_number<T>(v);
            if (!n) return "expected a non-negative integer, got '" + v + "'";
            c.*member = *n;
            return std::nullopt;
          },
          [member](const RunConfig& c) { return std::to_string(c.*member); }};
}

template <typename Getter0>
Field size_ref(std::string key, Getter0 ref) {
  return {key,
          [ref](RunConfig& c, const std::string& v) -> std::optional<std::string> {
            const auto n = parse_number<std::size_t>(v);
            if (!n) return "expected a non-negative integer, got '" + v + "'";
            ref(c) = *n;
            return std::nullopt;
          },
          [ref](const RunConfig& c) { return std::to_string(ref(const_cast<RunConfig&>(c))); }};
}

template <typename Getter0>
Field double_ref(std::string key, Getter0 ref) {
  return {key,
          [ref](RunConfig& c, const std::string& v) -> std::optional<std::string> {
            const auto d = parse_double(v);
            if (!d) return "expected a number, got '" + v + "'";
            ref(c) = *d;
            return std::nullopt;
          },
          [ref](const RunConfig& c) { return format_double(ref(const_cast<RunConfig&>(c))); }};
}

template <typename Getter0>
Field bool_ref(std::string key, Getter0 ref) {
  return {key,
          [ref](RunConfig& c, const std::string& v) -> std::optional<std::string> {
            const auto b = parse_bool(v);
            if (!b) return "expected true or false, got '" + v + "'";
            ref(c) = *b;
            return std::nullopt;
          },
          [ref](const RunConfig& c) { return std::string(ref(const_cast<RunConfig&>(c)) ? "true" : "false"); }};
}

template <typename Getter0>
Field string_ref(std::string key, Getter0 ref) {
  return {key,
          [ref](RunConfig& c, const std::string& v) -> std::optional<std::string> {
            ref(c) = v;
            return std::nullopt;
          },
          [ref](const RunConfig& c) { return std::string(ref(const_cast<RunConfig&>(c))); }};
}

template <typename E>
Field enum_ref(std::string key, E RunConfig::*member, std::vector<std::pair<std::string, E>> names) {
  return {key,
          [member, names](RunConfig& c, const std::string& v) -> std::optional<std::string> {
            std::string options;
            for (const auto& [n, e] : names) {
              if (n == v) {
                c.*member = e;
                return std::nullopt;
              }
              options += (options.empty() ? "" : "|") + n;
            }
            return "expected one of " + options + ", got '" + v + "'";
          },
          [member, names](const RunConfig& c) {
            for (const auto& [n, e] : names) {
              if (e == c.*member) return n;
            }
            return std::string("?");
          }};
}

#define REF(expr) [](RunConfig& c) -> auto& { return c.expr; }

const std::vector<Field>& fields() {
  static const std::vector<Field> kFields = [] {
    const std::vector<std::pair<std::string, ModelKind>> models = {
        {"mscqg", ModelKind::kMscqg},          {"msqg", ModelKind::kMsqg},     {"top-tfidf", ModelKind::kTopTfidf},
        {"top-frequent", ModelKind::kTopFrequent}, {"oracle", ModelKind::kOracle}};
    std::vector<Field> f;
    f.push_back(size_field("seed", &RunConfig::seed));
    f.push_back(string_ref("run_id", REF(run_id)));
    f.push_back({"data_dir",
                 [](RunConfig& c, const std::string& v) -> std::optional<std::string> {
                   c.data_dir = v;
                   return std::nullopt;
                 },
                 [](const RunConfig& c) { return c.data_dir.string(); }});
    f.push_back({"checkpoint_dir",
                 [](RunConfig& c, const std::string& v) -> std::optional<std::string> {
                   c.checkpoint_dir = v;
                   return std::nullopt;
                 },
                 [](const RunConfig& c) { return c.checkpoint_dir.string(); }});
    f.push_back({"reports_dir",
                 [](RunConfig& c, const std::string& v) -> std::optional<std::string> {
                   c.reports_dir = v;
                   return std::nullopt;
                 },
                 [](const RunConfig& c) { return c.reports_dir.string(); }});
    f.push_back(string_ref("coordinator_name", REF(coordinator_name)));

    f.push_back(size_ref("data.num_pairs", REF(data.num_pairs)));
    f.push_back(size_ref("data.docs_per_set", REF(data.docs_per_set)));
    f.push_back(size_ref("data.sentences_per_doc", REF(data.sentences_per_doc)));
    f.push_back(size_ref("data.pool_size", REF(data.pool_size)));
    f.push_back(double_ref("data.overlap", REF(data.overlap)));
    f.push_back(size_ref("data.train_pairs", REF(train_pairs)));
    f.push_back(size_ref("pretrain.num_pairs", REF(pretrain.num_pairs)));
    f.push_back(size_ref("pretrain.docs_per_set", REF(pretrain.docs_per_set)));
    f.push_back(size_ref("pretrain.sentences_per_doc", REF(pretrain.sentences_per_doc)));
    f.push_back(size_ref("pretrain.pool_size", REF(pretrain.pool_size)));
    f.push_back(double_ref("pretrain.overlap", REF(pretrain.overlap)));
    f.push_back(size_ref("vocab_size", REF(vocab_size)));

    f.push_back(size_ref("generator.hidden", REF(generator.hidden)));
    f.push_back(size_ref("generator.layers", REF(generator.layers)));
    f.push_back(size_ref("generator.heads", REF(generator.heads)));
    f.push_back(size_ref("generator.max_context", REF(generator.max_context)));
    f.push_back(double_ref("generator.learning_rate", REF(generator.learning_rate)));
    f.push_back(double_ref("generator.weight_decay", REF(generator.weight_decay)));
    f.push_back(size_ref("generator.epochs", REF(generator.epochs)));
    f.push_back(size_ref("generator.batch_size", REF(generator.batch_size)));

    f.push_back(size_ref("coordinator.hidden", REF(coordinator.hidden)));
    f.push_back(size_ref("coordinator.blocks", REF(coordinator.blocks)));
    f.push_back(size_ref("coordinator.heads", REF(coordinator.heads)));
    f.push_back(size_ref("coordinator.max_length", REF(coordinator.max_length)));
    f.push_back(size_ref("coordinator.steps", REF(coordinator_steps)));
    f.push_back(double_ref("coordinator.learning_rate", REF(coordinator_optimizer.learning_rate)));
    f.push_back(double_ref("coordinator.weight_decay", REF(coordinator_optimizer.weight_decay)));
    f.push_back(double_ref("coordinator.temperature", REF(temperature)));

    f.push_back(double_ref("lambda.pg", REF(lambda.pg)));
    f.push_back(double_ref("lambda.scr", REF(lambda.scr)));
    f.push_back(double_ref("lambda.entropy", REF(lambda.entropy)));
    f.push_back(bool_ref("enable_pg", REF(enable_pg)));
    f.push_back(bool_ref("enable_scr", REF(enable_scr)));
    f.push_back(bool_ref("enable_entropy", REF(enable_entropy)));
    f.push_back(bool_ref("null_neg", REF(null_neg)));

    f.push_back({"reward.statistic",
                 [](RunConfig& c, const std::string& v) -> std::optional<std::string> {
                   if (v == "precision") c.reward.statistic = RewardStatistic::kPrecisionAtK;
                   else if (v == "map") c.reward.statistic = RewardStatistic::kMap;
                   else return "expected precision|map, got '" + v + "'";
                   return std::nullopt;
                 },
                 [](const RunConfig& c) {
                   return std::string(c.reward.statistic == RewardStatistic::kMap ? "map" : "precision");
                 }});
    f.push_back(size_ref("reward.k", REF(reward.k)));
    f.push_back({"reward.critic",
                 [](RunConfig& c, const std::string& v) -> std::optional<std::string> {
                   if (v == "oracle") c.reward.critic = Critic::kOracle;
                   else if (v == "self") c.reward.critic = Critic::kSelf;
                   else return "expected oracle|self, got '" + v + "'";
                   return std::nullopt;
                 },
                 [](const RunConfig& c) { return std::string(c.reward.critic == Critic::kSelf ? "self" : "oracle"); }});

    f.push_back(enum_ref<RankerKind>("ranker", &RunConfig::ranker,
                                     {{"bm25", RankerKind::kBm25}, {"mock-constant", RankerKind::kMockConstant}}));
    f.push_back(double_ref("ranker.slope", REF(bm25.slope)));
    f.push_back(double_ref("ranker.offset", REF(bm25.offset)));
    f.push_back(double_ref("ranker.constant", REF(constant_score)));
    f.push_back(double_ref("bm25.k1", REF(bm25.bm25.k1)));
    f.push_back(double_ref("bm25.b", REF(bm25.bm25.b)));

    f.push_back(enum_ref<ModelKind>("model", &RunConfig::model, models));
    f.push_back(string_ref("eval.split", REF(split)));
    f.push_back(size_ref("eval.k", REF(eval_k)));
    f.push_back(size_ref("eval.depth", REF(retrieval_depth)));
    return f;
  }();
  return kFields;
}

#undef REF

}  // namespace

ConfigError::ConfigError(std::vector<std::string> problems)
    : std::runtime_error([&] {
        std::string msg = "invalid configuration:";
        for (const auto& p : problems) msg += "\n  - " + p;
        return msg;
      }()),
      problems_(std::move(problems)) {}

std::optional<std::string> set_config_value(RunConfig& cfg, const std::string& key, const std::string& value) {
  for (const auto& f : fields()) {
    if (f.key == key) {
      if (auto err = f.set(cfg, value)) return key + ": " + *err;
      return std::nullopt;
    }
  }
  return "unknown key '" + key + "'";
}

void apply_config_text(RunConfig& cfg, const std::string& text, const std::string& source,
                       std::vector<std::string>& problems) {
  std::istringstream in(text);
  std::string line;
  for (std::size_t n = 1; std::getline(in, line); ++n) {
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const std::string t = trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    const std::string where = source + ":" + std::to_string(n) + ": ";
    if (eq == std::string::npos) {
      problems.push_back(where + "expected 'key = value'");
      continue;
    }
    if (auto err = set_config_value(cfg, trim(t.substr(0, eq)), trim(t.substr(eq + 1)))) {
      problems.push_back(where + *err);
    }
  }
}

std::string format_config(const RunConfig& cfg) {
  std::string out;
  for (const auto& f : fields()) out += f.key + " = " + f.get(cfg) + "\n";
  return out;
}

std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& f : fields()) keys.push_back(f.key);
  return keys;
}

ModelKind parse_model_kind(const std::string& name) {
  for (ModelKind k : {ModelKind::kMscqg, ModelKind::kMsqg, ModelKind::kTopTfidf, ModelKind::kTopFrequent,
                      ModelKind::kOracle}) {
    if (model_name(k) == name) return k;
  }
  throw std::invalid_argument("unknown model '" + name + "'");
}

SyntheticSpec RunConfig::data_spec() const {
  SyntheticSpec s = data;
  s.seed = seed;
  s.lexicon_seed.reset();
  return s;
}

SyntheticSpec RunConfig::pretrain_spec() const {
  SyntheticSpec s = pretrain;
  s.seed = seed + 1;
  s.lexicon_seed = seed;
  return s;
}

Vocabulary RunConfig::build_vocabulary(std::span<const ContrastiveInstance> data_set,
                                       std::span<const ContrastiveInstance> pretrain_set) const {
  auto texts = collect_texts(data_set);
  const auto extra = collect_texts(pretrain_set);
  texts.insert(texts.end(), extra.begin(), extra.end());
  return Vocabulary::build(texts, vocab_size);
}

GeneratorConfig RunConfig::generator_config(std::size_t vocab) const {
  GeneratorConfig g = generator;
  g.vocab_size = vocab;
  g.seed = seed;
  return g;
}

CoordinatorConfig RunConfig::coordinator_config() const {
  CoordinatorConfig c = coordinator;
  c.seed = seed;
  return c;
}

LossWeights RunConfig::loss_weights() const {
  return LossWeights{.pg = enable_pg ? lambda.pg : 0.0,
                     .scr = enable_scr ? lambda.scr : 0.0,
                     .entropy = enable_entropy ? lambda.entropy : 0.0};
}

TrainOptions RunConfig::train_options() const {
  TrainOptions o;
  o.reward = reward;
  o.weights = loss_weights();
  o.null_neg = null_neg;
  o.temperature = temperature;
  o.max_len = coordinator.max_length;
  return o;
}

CoordinatorTraining RunConfig::coordinator_training() const {
  CoordinatorTraining t;
  t.steps = coordinator_steps;
  t.optimizer = coordinator_optimizer;
  t.options = train_options();
  t.seed = seed;
  return t;
}

std::vector<std::string> RunConfig::violations() const {
  std::vector<std::string> v;
  auto need = [&](bool ok, const std::string& msg) {
    if (!ok) v.push_back(msg);
  };
  auto check = [&](auto&& validate) {
    try {
      validate();
    } catch (const std::exception& e) {
      v.push_back(e.what());
    }
  };
  need(!run_id.empty() && run_id.find_first_of("/\\") == std::string::npos,
       "run_id must be a non-empty name without path separators");
  need(!coordinator_name.empty(), "coordinator_name must not be empty");
  need(data.num_pairs >= 2, "data.num_pairs must be >= 2");
  need(train_pairs >= 1 && train_pairs < data.num_pairs, "data.train_pairs must be in [1, data.num_pairs)");
  need(data.docs_per_set >= 1, "data.docs_per_set must be >= 1");
  need(data.sentences_per_doc >= 1, "data.sentences_per_doc must be >= 1");
  need(data.pool_size >= 3, "data.pool_size must be >= 3");
  need(data.overlap >= 0.0 && data.overlap <= 1.0, "data.overlap must be in [0, 1]");
  need(pretrain.num_pairs >= 1, "pretrain.num_pairs must be >= 1");
  need(pretrain.docs_per_set >= 1, "pretrain.docs_per_set must be >= 1");
  need(pretrain.sentences_per_doc >= 1, "pretrain.sentences_per_doc must be >= 1");
  need(pretrain.pool_size >= 3, "pretrain.pool_size must be >= 3");
  need(pretrain.overlap >= 0.0 && pretrain.overlap <= 1.0, "pretrain.overlap must be in [0, 1]");
  need(vocab_size >= 5, "vocab_size must be >= 5");
  check([&] {
    GeneratorConfig g = generator;
    g.vocab_size = vocab_size;
    g.validate();
  });
  check([&] { coordinator.validate(); });
  need(coordinator_optimizer.learning_rate > 0.0, "coordinator.learning_rate must be positive");
  need(coordinator_optimizer.weight_decay >= 0.0, "coordinator.weight_decay must be >= 0");
  need(temperature > 0.0 && std::isfinite(temperature), "coordinator.temperature must be positive");
  for (auto [name, value] : {std::pair{"lambda.pg", lambda.pg}, std::pair{"lambda.scr", lambda.scr},
                             std::pair{"lambda.entropy", lambda.entropy}}) {
    need(value >= 0.0 && std::isfinite(value), std::string(name) + " must be a finite non-negative number");
  }
  need(enable_pg || enable_scr || enable_entropy, "at least one of enable_pg, enable_scr, enable_entropy must be true");
  need(reward.k >= 1 && reward.k <= 2 * data.docs_per_set, "reward.k must be in [1, 2 * data.docs_per_set]");
  need(bm25.bm25.k1 >= 0.0, "bm25.k1 must be >= 0");
  need(bm25.bm25.b >= 0.0 && bm25.bm25.b <= 1.0, "bm25.b must be in [0, 1]");
  need(bm25.slope > 0.0, "ranker.slope must be positive");
  need(constant_score > 0.0 && constant_score < 1.0, "ranker.constant must be in (0, 1)");
  need(split == "train" || split == "test" || split == "all", "eval.split must be train, test or all");
  need(eval_k >= 1, "eval.k must be >= 1");
  need(retrieval_depth >= 1, "eval.depth must be >= 1");
  return v;
}

}  // namespace mscqg
