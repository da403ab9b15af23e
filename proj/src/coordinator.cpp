#include "mscqg/coordinator.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace mscqg {

void CoordinatorConfig::validate() const {
  if (hidden == 0 || blocks == 0 || heads == 0) throw std::invalid_argument("coordinator: hidden, blocks, heads must be >= 1");
  if (hidden % heads != 0) throw std::invalid_argument("coordinator: hidden must be divisible by heads");
  if (max_length == 0) throw std::invalid_argument("coordinator: max_length must be >= 1");
  if (!(layer_norm_eps > 0.0)) throw std::invalid_argument("coordinator: layer_norm_eps must be positive");
}

namespace {

Parameter weight(std::string name, std::size_t rows, std::size_t cols, double std, Rng& rng) {
  Parameter p{std::move(name), Matrix(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols))};
  for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = truncated_normal(rng, std);
  return p;
}

Parameter filled(std::string name, std::size_t cols, double v) {
  return Parameter{std::move(name), Matrix::Constant(1, static_cast<Eigen::Index>(cols), v)};
}

template <class Self, class Out>
void collect(Self& self, Out& out) {
  out.push_back(&self.cluster);
  for (auto& b : self.blocks) {
    for (auto* p : {&b.wq, &b.bq, &b.wk, &b.bk, &b.wv, &b.bv, &b.wo, &b.bo, &b.ln1_gain, &b.ln1_bias, &b.w_up,
                    &b.b_up, &b.w_down, &b.b_down, &b.ln2_gain, &b.ln2_bias}) {
      out.push_back(p);
    }
  }
  for (auto* p : {&self.head_w, &self.head_w_bias, &self.head_v, &self.head_v_bias, &self.head_z, &self.head_z_bias}) {
    out.push_back(p);
  }
}

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

CoordinatorParams CoordinatorParams::initialize(const CoordinatorConfig& cfg) {
  cfg.validate();
  Rng rng = make_stream(cfg.seed, "coordinator-init");
  const std::size_t h = cfg.hidden, ff = 4 * cfg.hidden;
  CoordinatorParams p;
  p.config = cfg;
  p.cluster = weight("coord.cluster", 2, h, cfg.init_std, rng);
  for (std::size_t i = 0; i < cfg.blocks; ++i) {
    const std::string pre = "coord.block" + std::to_string(i) + ".";
    CoordinatorBlock b;
    b.wq = weight(pre + "wq", h, h, cfg.init_std, rng);
    b.bq = filled(pre + "bq", h, 0.0);
    b.wk = weight(pre + "wk", h, h, cfg.init_std, rng);
    b.bk = filled(pre + "bk", h, 0.0);
    b.wv = weight(pre + "wv", h, h, cfg.init_std, rng);
    b.bv = filled(pre + "bv", h, 0.0);
    b.wo = weight(pre + "wo", h, h, cfg.init_std, rng);
    b.bo = filled(pre + "bo", h, 0.0);
    b.ln1_gain = filled(pre + "ln1_gain", h, 1.0);
    b.ln1_bias = filled(pre + "ln1_bias", h, 0.0);
    b.w_up = weight(pre + "w_up", h, ff, cfg.init_std, rng);
    b.b_up = filled(pre + "b_up", ff, 0.0);
    b.w_down = weight(pre + "w_down", ff, h, cfg.init_std, rng);
    b.b_down = filled(pre + "b_down", h, 0.0);
    b.ln2_gain = filled(pre + "ln2_gain", h, 1.0);
    b.ln2_bias = filled(pre + "ln2_bias", h, 0.0);
    p.blocks.push_back(std::move(b));
  }
  p.head_w = weight("coord.head_w", h, 1, cfg.init_std, rng);
  p.head_w_bias = filled("coord.head_w_bias", 1, 0.0);
  p.head_v = weight("coord.head_v", h, 1, cfg.init_std, rng);
  p.head_v_bias = filled("coord.head_v_bias", 1, 0.0);
  p.head_z = weight("coord.head_z", h, 1, cfg.init_std, rng);
  p.head_z_bias = filled("coord.head_z_bias", 1, 0.0);
  return p;
}

std::vector<Parameter*> CoordinatorParams::parameters() {
  std::vector<Parameter*> out;
  collect(*this, out);
  return out;
}

std::vector<const Parameter*> CoordinatorParams::parameters() const {
  std::vector<const Parameter*> out;
  collect(*this, out);
  return out;
}

double eta(double z) {
  if (!std::isfinite(z)) throw std::invalid_argument("eta: z must be finite");
  double e = 1.5 * sigmoid(-2.0 * z) - 1.0;
  // Saturated sigmoids would otherwise land exactly on the open bounds.
  if (e <= -1.0) e = std::nextafter(-1.0, 0.0);
  if (e >= 0.5) e = std::nextafter(0.5, 0.0);
  return e;
}

double eta_derivative(double z) {
  const double s = sigmoid(-2.0 * z);
  return -3.0 * s * (1.0 - s);
}

namespace {

ag::Var eta_var(ag::Var z) {
  const double zv = z.scalar();
  const int iz = z.id();
  return z.tape()->record(Matrix::Constant(1, 1, eta(zv)), {z}, [iz, zv](ag::Tape& t, const Matrix& g) {
    t.accumulate(iz, Matrix::Constant(1, 1, g(0, 0) * eta_derivative(zv)));
  });
}

ag::Var block_forward(ag::Tape& tape, const CoordinatorBlock& b, ag::Var x, const CoordinatorConfig& cfg) {
  const auto dh = static_cast<Eigen::Index>(cfg.hidden / cfg.heads);
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  ag::Var q = ag::add_row(ag::matmul(x, tape.parameter(b.wq)), tape.parameter(b.bq));
  ag::Var k = ag::add_row(ag::matmul(x, tape.parameter(b.wk)), tape.parameter(b.bk));
  ag::Var v = ag::add_row(ag::matmul(x, tape.parameter(b.wv)), tape.parameter(b.bv));
  std::vector<ag::Var> heads;
  for (std::size_t h = 0; h < cfg.heads; ++h) {
    const auto c0 = static_cast<Eigen::Index>(h) * dh;
    ag::Var scores = ag::scale(ag::matmul_nt(ag::slice_cols(q, c0, dh), ag::slice_cols(k, c0, dh)), inv_sqrt);
    heads.push_back(ag::matmul(ag::softmax_rows(scores), ag::slice_cols(v, c0, dh)));
  }
  ag::Var attn = ag::add_row(ag::matmul(ag::concat_cols(heads), tape.parameter(b.wo)), tape.parameter(b.bo));
  ag::Var u = ag::layer_norm(ag::add(x, attn), tape.parameter(b.ln1_gain), tape.parameter(b.ln1_bias),
                             cfg.layer_norm_eps);
  ag::Var up = ag::gelu(ag::add_row(ag::matmul(u, tape.parameter(b.w_up)), tape.parameter(b.b_up)));
  ag::Var ff = ag::add_row(ag::matmul(up, tape.parameter(b.w_down)), tape.parameter(b.b_down));
  return ag::layer_norm(ag::add(u, ff), tape.parameter(b.ln2_gain), tape.parameter(b.ln2_bias), cfg.layer_norm_eps);
}

ag::Var set_weights(ag::Tape& tape, ag::Var xn, const std::vector<int>& rows, const Parameter& head,
                    const Parameter& bias) {
  ag::Var scores = ag::add_row(ag::matmul(ag::select_rows(xn, rows), tape.parameter(head)), tape.parameter(bias));
  return ag::softmax_rows(ag::transpose(scores));
}

}  // namespace

CoordinatorVars coordinator_graph(ag::Tape& tape, const CoordinatorParams& params, const Matrix& hidden,
                                  std::span<const Membership> membership) {
  const auto& cfg = params.config;
  if (hidden.cols() != static_cast<Eigen::Index>(cfg.hidden)) {
    throw std::invalid_argument("coordinator: hidden state dimension " + std::to_string(hidden.cols()) +
                                " does not match " + std::to_string(cfg.hidden));
  }
  if (static_cast<std::size_t>(hidden.rows()) != membership.size()) {
    throw std::invalid_argument("coordinator: membership length does not match hidden states");
  }
  std::vector<int> cluster_ids, pos_rows, neg_rows;
  for (std::size_t i = 0; i < membership.size(); ++i) {
    const bool pos = membership[i] == Membership::kPositive;
    cluster_ids.push_back(pos ? 0 : 1);
    (pos ? pos_rows : neg_rows).push_back(static_cast<int>(i));
  }
  if (pos_rows.empty()) throw std::invalid_argument("coordinator: at least one positive document is required");

  ag::Var x = ag::add(tape.constant(hidden), ag::gather_rows(tape.parameter(params.cluster), cluster_ids));
  for (const auto& b : params.blocks) x = block_forward(tape, b, x, cfg);

  CoordinatorVars out;
  out.w = set_weights(tape, x, pos_rows, params.head_w, params.head_w_bias);
  if (!neg_rows.empty()) out.v = set_weights(tape, x, neg_rows, params.head_v, params.head_v_bias);
  out.z = ag::add(ag::matmul(ag::mean_rows(x), tape.parameter(params.head_z)), tape.parameter(params.head_z_bias));
  out.eta = eta_var(out.z);
  return out;
}

CoordinatorStepOutput coordinator_forward(const CoordinatorParams& params, const Matrix& hidden,
                                          std::span<const Membership> membership) {
  ag::Tape tape;
  auto vars = coordinator_graph(tape, params, hidden, membership);
  CoordinatorStepOutput out;
  out.w = vars.w.value().row(0);
  if (vars.v.valid()) out.v = vars.v.value().row(0);
  out.z = vars.z.scalar();
  out.eta = vars.eta.scalar();
  return out;
}

AggregatedDistribution aggregate(const CoordinatorStepOutput& step, const Matrix& pos_dists, const Matrix& neg_dists) {
  if (pos_dists.rows() != step.w.size()) throw std::invalid_argument("aggregate: w does not match positive documents");
  if (neg_dists.rows() != step.v.size()) throw std::invalid_argument("aggregate: v does not match negative documents");
  if (neg_dists.rows() > 0 && neg_dists.cols() != pos_dists.cols()) {
    throw std::invalid_argument("aggregate: vocabulary size mismatch between sets");
  }
  const RowVector pos_mix = step.w * pos_dists;
  RowVector raw = pos_mix;
  if (neg_dists.rows() > 0) raw -= step.eta * (step.v * neg_dists);

  AggregatedDistribution out;
  out.keep = (raw.array() > 0.0).cast<double>().matrix();
  const RowVector kept = raw.cwiseProduct(out.keep);
  out.normalizer = kept.sum();
  if (out.normalizer <= kFallbackThreshold) {
    out.fallback_used = true;
    out.probs = pos_mix;
  } else {
    out.probs = kept / out.normalizer;
  }
  return out;
}

ag::Var aggregate_graph(const CoordinatorVars& vars, const Matrix& pos_dists, const Matrix& neg_dists,
                        const RowVector& keep, bool fallback_used) {
  ag::Tape& tape = *vars.w.tape();
  ag::Var pos_mix = ag::matmul(vars.w, tape.constant(pos_dists));
  if (fallback_used) return pos_mix;
  ag::Var raw = pos_mix;
  if (neg_dists.rows() > 0) {
    ag::Var neg_mix = ag::matmul(vars.v, tape.constant(neg_dists));
    raw = ag::sub(pos_mix, ag::mul_scalar(neg_mix, vars.eta));
  }
  ag::Var kept = ag::mul_const(raw, keep);
  return ag::div_scalar(kept, ag::sum(kept));
}

std::vector<Membership> DecodeTrace::membership() const {
  std::vector<Membership> m;
  if (steps.empty()) return m;
  m.assign(static_cast<std::size_t>(steps.front().pos_dists.rows()), Membership::kPositive);
  m.insert(m.end(), static_cast<std::size_t>(steps.front().neg_dists.rows()), Membership::kNegative);
  return m;
}

const GeneratorStream& PrefixCache::get(const Document& doc) {
  auto it = streams_.find(doc.id);
  if (it != streams_.end()) return it->second;
  GeneratorStream s(*gen_);
  s.extend(decode_prefix(doc.tokens, gen_->config.max_context, max_len_));
  return streams_.emplace(doc.id, std::move(s)).first->second;
}

TokenId choose_token(const RowVector& probs, const DecodeOptions& options) {
  if (!options.sample) return static_cast<TokenId>(argmax_lowest(std::span<const double>(probs.data(), probs.size())));
  if (options.rng == nullptr) throw std::invalid_argument("decode: sampling requires an rng");
  if (!(options.temperature > 0.0)) throw std::invalid_argument("decode: temperature must be positive");
  std::vector<double> weights(static_cast<std::size_t>(probs.size()));
  for (Eigen::Index i = 0; i < probs.size(); ++i) {
    const double p = probs(i);
    weights[static_cast<std::size_t>(i)] = p > 0.0 ? (options.temperature == 1.0 ? p : std::pow(p, 1.0 / options.temperature)) : 0.0;
  }
  return static_cast<TokenId>(sample_categorical(*options.rng, weights));
}

DecodeTrace decode_common(const GeneratorParams& gen, const CoordinatorParams& coord, const ContrastiveInstance& inst,
                          const DecodeOptions& options, PrefixCache* cache) {
  if (gen.config.hidden != coord.config.hidden) {
    throw std::invalid_argument("decode: generator hidden size does not match the coordinator");
  }
  if (inst.positive_docs.empty()) throw std::invalid_argument("decode: instance has no positive documents");
  std::vector<const Document*> docs;
  for (const auto& d : inst.positive_docs) docs.push_back(&d);
  const std::size_t n_pos = docs.size();
  if (!options.null_neg) {
    for (const auto& d : inst.negative_docs) docs.push_back(&d);
  }
  const std::size_t n_neg = docs.size() - n_pos;
  for (const Document* d : docs) {
    if (d->tokens.empty()) throw std::invalid_argument("decode: document '" + d->id + "' has not been tokenized");
  }

  std::optional<PrefixCache> local;
  if (cache == nullptr) {
    local.emplace(gen, options.max_len);
    cache = &*local;
  }
  std::vector<GeneratorStream> streams;
  streams.reserve(docs.size());
  for (const Document* d : docs) streams.push_back(cache->get(*d));

  std::vector<Membership> membership(n_pos, Membership::kPositive);
  membership.insert(membership.end(), n_neg, Membership::kNegative);

  const auto V = static_cast<Eigen::Index>(gen.config.vocab_size);
  const auto H = static_cast<Eigen::Index>(gen.config.hidden);
  DecodeTrace trace;
  for (std::size_t t = 0; t < options.max_len; ++t) {
    DecodeStep step;
    step.pos_dists.resize(static_cast<Eigen::Index>(n_pos), V);
    step.neg_dists.resize(static_cast<Eigen::Index>(n_neg), V);
    step.hidden.resize(static_cast<Eigen::Index>(docs.size()), H);
    for (std::size_t i = 0; i < docs.size(); ++i) {
      const GeneratorStepOutput out = t == 0 ? streams[i].output() : streams[i].push(trace.steps.back().token);
      step.hidden.row(static_cast<Eigen::Index>(i)) = out.hidden;
      if (i < n_pos) {
        step.pos_dists.row(static_cast<Eigen::Index>(i)) = out.dist;
      } else {
        step.neg_dists.row(static_cast<Eigen::Index>(i - n_pos)) = out.dist;
      }
    }
    step.coord = coordinator_forward(coord, step.hidden, membership);
    if (options.force_uniform_weights) {
      step.coord.w = RowVector::Constant(static_cast<Eigen::Index>(n_pos), 1.0 / static_cast<double>(n_pos));
      if (n_neg > 0) step.coord.v = RowVector::Constant(static_cast<Eigen::Index>(n_neg), 1.0 / static_cast<double>(n_neg));
    }
    if (options.force_eta) step.coord.eta = *options.force_eta;
    step.agg = aggregate(step.coord, step.pos_dists, step.neg_dists);
    step.token = choose_token(step.agg.probs, options);
    const double p = step.agg.probs(step.token);
    step.log_prob = p > 0.0 ? std::log(p) : -std::numeric_limits<double>::infinity();
    const TokenId tok = step.token;
    trace.steps.push_back(std::move(step));
    if (tok == kEos) break;
    trace.question.push_back(tok);
  }
  return trace;
}

}  // namespace mscqg
