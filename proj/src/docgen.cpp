#include "mscqg/docgen.hpp"

#include "mscqg/optim.hpp"
#include "mscqg/rng.hpp"

#include <cmath>
#include <iostream>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace mscqg {

void GeneratorConfig::validate() const {
  if (vocab_size < kNumSpecials) throw std::invalid_argument("generator: vocab_size must be at least 4");
  if (hidden == 0 || layers == 0 || heads == 0 || max_context == 0 || epochs == 0 || batch_size == 0) {
    throw std::invalid_argument("generator: hidden, layers, heads, max_context, epochs and batch_size must be >= 1");
  }
  if (hidden % heads != 0) throw std::invalid_argument("generator: hidden must be divisible by heads");
  if (!(learning_rate > 0.0)) throw std::invalid_argument("generator: learning_rate must be positive");
  if (!(weight_decay >= 0.0)) throw std::invalid_argument("generator: weight_decay must be non-negative");
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
  out.push_back(&self.token_embedding);
  out.push_back(&self.position_embedding);
  for (auto& l : self.layers) {
    for (auto* p : {&l.ln1_gain, &l.ln1_bias, &l.wq, &l.bq, &l.wk, &l.bk, &l.wv, &l.bv, &l.wo, &l.bo, &l.ln2_gain,
                    &l.ln2_bias, &l.w_up, &l.b_up, &l.w_down, &l.b_down}) {
      out.push_back(p);
    }
  }
  out.push_back(&self.final_gain);
  out.push_back(&self.final_bias);
  out.push_back(&self.output_bias);
}

}  // namespace

GeneratorParams GeneratorParams::initialize(const GeneratorConfig& cfg) {
  cfg.validate();
  Rng rng = make_stream(cfg.seed, "generator-init");
  const std::size_t h = cfg.hidden, v = cfg.vocab_size, ff = 4 * cfg.hidden;
  GeneratorParams p;
  p.config = cfg;
  p.token_embedding = weight("gen.token_embedding", v, h, cfg.init_std, rng);
  p.position_embedding = weight("gen.position_embedding", cfg.max_context, h, cfg.init_std, rng);
  for (std::size_t i = 0; i < cfg.layers; ++i) {
    const std::string pre = "gen.layer" + std::to_string(i) + ".";
    GeneratorLayer l;
    l.ln1_gain = filled(pre + "ln1_gain", h, 1.0);
    l.ln1_bias = filled(pre + "ln1_bias", h, 0.0);
    l.wq = weight(pre + "wq", h, h, cfg.init_std, rng);
    l.bq = filled(pre + "bq", h, 0.0);
    l.wk = weight(pre + "wk", h, h, cfg.init_std, rng);
    l.bk = filled(pre + "bk", h, 0.0);
    l.wv = weight(pre + "wv", h, h, cfg.init_std, rng);
    l.bv = filled(pre + "bv", h, 0.0);
    l.wo = weight(pre + "wo", h, h, cfg.init_std, rng);
    l.bo = filled(pre + "bo", h, 0.0);
    l.ln2_gain = filled(pre + "ln2_gain", h, 1.0);
    l.ln2_bias = filled(pre + "ln2_bias", h, 0.0);
    l.w_up = weight(pre + "w_up", h, ff, cfg.init_std, rng);
    l.b_up = filled(pre + "b_up", ff, 0.0);
    l.w_down = weight(pre + "w_down", ff, h, cfg.init_std, rng);
    l.b_down = filled(pre + "b_down", h, 0.0);
    p.layers.push_back(std::move(l));
  }
  p.final_gain = filled("gen.final_gain", h, 1.0);
  p.final_bias = filled("gen.final_bias", h, 0.0);
  p.output_bias = filled("gen.output_bias", v, 0.0);
  return p;
}

std::vector<Parameter*> GeneratorParams::parameters() {
  std::vector<Parameter*> out;
  collect(*this, out);
  return out;
}

std::vector<const Parameter*> GeneratorParams::parameters() const {
  std::vector<const Parameter*> out;
  collect(*this, out);
  return out;
}

// ---------------------------------------------------------------------------
// Inference

namespace {

RowVector layer_norm_row(const RowVector& x, const Matrix& gain, const Matrix& bias, double eps) {
  const double mu = x.mean();
  const double var = (x.array() - mu).square().mean();
  RowVector y = ((x.array() - mu) / std::sqrt(var + eps)).matrix();
  return (y.array() * gain.row(0).array() + bias.row(0).array()).matrix();
}

RowVector gelu_row(const RowVector& x) {
  RowVector y(x.size());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double v = x(i);
    y(i) = 0.5 * v * (1.0 + std::tanh(0.7978845608028654 * (v + 0.044715 * v * v * v)));
  }
  return y;
}

RowVector softmax_row(const RowVector& logits) {
  const double m = logits.maxCoeff();
  RowVector e = (logits.array() - m).exp().matrix();
  return e / e.sum();
}

}  // namespace

GeneratorStream::GeneratorStream(const GeneratorParams& params) : params_(&params) {
  const auto ctx = static_cast<Eigen::Index>(params.config.max_context);
  const auto h = static_cast<Eigen::Index>(params.config.hidden);
  keys_.assign(params.layers.size(), Matrix(ctx, h));
  values_.assign(params.layers.size(), Matrix(ctx, h));
}

void GeneratorStream::append(TokenId token) {
  const auto& p = *params_;
  const auto& cfg = p.config;
  if (length_ >= cfg.max_context) throw std::length_error("generator: context longer than max_context");
  if (token < 0 || static_cast<std::size_t>(token) >= cfg.vocab_size) throw std::out_of_range("generator: token id");
  const auto pos = static_cast<Eigen::Index>(length_);
  const auto n_heads = static_cast<Eigen::Index>(cfg.heads);
  const auto dh = static_cast<Eigen::Index>(cfg.hidden / cfg.heads);
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

  RowVector x = p.token_embedding.value.row(token) + p.position_embedding.value.row(pos);
  for (std::size_t li = 0; li < p.layers.size(); ++li) {
    const auto& l = p.layers[li];
    const RowVector a = layer_norm_row(x, l.ln1_gain.value, l.ln1_bias.value, cfg.layer_norm_eps);
    const RowVector q = a * l.wq.value + l.bq.value;
    keys_[li].row(pos) = a * l.wk.value + l.bk.value;
    values_[li].row(pos) = a * l.wv.value + l.bv.value;
    RowVector attn(static_cast<Eigen::Index>(cfg.hidden));
    for (Eigen::Index h = 0; h < n_heads; ++h) {
      const auto k_block = keys_[li].block(0, h * dh, pos + 1, dh);
      const auto v_block = values_[li].block(0, h * dh, pos + 1, dh);
      RowVector scores = (q.segment(h * dh, dh) * k_block.transpose()) * inv_sqrt;
      const RowVector w = softmax_row(scores);
      attn.segment(h * dh, dh) = w * v_block;
    }
    x += attn * l.wo.value + l.bo.value;
    const RowVector m = layer_norm_row(x, l.ln2_gain.value, l.ln2_bias.value, cfg.layer_norm_eps);
    const RowVector up = gelu_row(m * l.w_up.value + l.b_up.value);
    x += up * l.w_down.value + l.b_down.value;
  }
  last_ = layer_norm_row(x, p.final_gain.value, p.final_bias.value, cfg.layer_norm_eps);
  ++length_;
}

void GeneratorStream::extend(std::span<const TokenId> tokens) {
  for (TokenId t : tokens) append(t);
}

GeneratorStepOutput GeneratorStream::output() const {
  if (length_ == 0) throw std::logic_error("generator: output requested from an empty context");
  const auto& p = *params_;
  RowVector logits = last_ * p.token_embedding.value.transpose() + p.output_bias.value;
  return GeneratorStepOutput{last_, softmax_row(logits)};
}

GeneratorStepOutput GeneratorStream::push(TokenId token) {
  append(token);
  return output();
}

GeneratorStepOutput generator_step(const GeneratorParams& params, std::span<const TokenId> context) {
  if (context.empty()) throw std::invalid_argument("generator_step: empty context");
  if (context.size() > params.config.max_context) throw std::length_error("generator_step: context longer than max_context");
  GeneratorStream stream(params);
  stream.extend(context);
  return stream.output();
}

// ---------------------------------------------------------------------------
// Training

TrainingSequence make_training_sequence(std::span<const TokenId> doc, std::span<const TokenId> question,
                                        std::size_t max_context) {
  if (question.size() + 3 > max_context) {
    throw std::length_error("generator: question of " + std::to_string(question.size()) +
                            " tokens does not fit max_context " + std::to_string(max_context));
  }
  const std::size_t budget = max_context - question.size() - 2;
  TrainingSequence seq;
  std::size_t start = 0;
  if (doc.size() > budget) {
    start = doc.size() - budget;
    seq.truncated = true;
  }
  seq.tokens.assign(doc.begin() + static_cast<std::ptrdiff_t>(start), doc.end());
  seq.first_target = seq.tokens.size();
  seq.tokens.push_back(kSep);
  seq.tokens.insert(seq.tokens.end(), question.begin(), question.end());
  seq.tokens.push_back(kEos);
  return seq;
}

std::vector<TokenId> decode_prefix(std::span<const TokenId> doc, std::size_t max_context, std::size_t max_len) {
  if (max_len + 2 > max_context) throw std::length_error("decode_prefix: max_len leaves no room for the document");
  const std::size_t budget = max_context - max_len - 1;
  const std::size_t start = doc.size() > budget ? doc.size() - budget : 0;
  std::vector<TokenId> out(doc.begin() + static_cast<std::ptrdiff_t>(start), doc.end());
  out.push_back(kSep);
  return out;
}

ag::Var sequence_loss(ag::Tape& tape, const GeneratorParams& params, const TrainingSequence& seq) {
  const auto& cfg = params.config;
  const std::size_t len = seq.tokens.size();
  if (len < 2 || seq.first_target + 1 >= len) throw std::invalid_argument("sequence_loss: nothing to predict");
  if (len > cfg.max_context) throw std::length_error("sequence_loss: sequence longer than max_context");
  const auto n = static_cast<Eigen::Index>(len);
  const auto dh = static_cast<Eigen::Index>(cfg.hidden / cfg.heads);
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

  std::vector<int> positions(len);
  std::iota(positions.begin(), positions.end(), 0);
  ag::Var x = ag::add(ag::gather_rows(tape.parameter(params.token_embedding), seq.tokens),
                      ag::select_rows(tape.parameter(params.position_embedding), positions));

  Matrix causal = Matrix::Zero(n, n);
  for (Eigen::Index r = 0; r < n; ++r) {
    for (Eigen::Index c = r + 1; c < n; ++c) causal(r, c) = -std::numeric_limits<double>::infinity();
  }

  for (const auto& l : params.layers) {
    ag::Var a = ag::layer_norm(x, tape.parameter(l.ln1_gain), tape.parameter(l.ln1_bias), cfg.layer_norm_eps);
    ag::Var q = ag::add_row(ag::matmul(a, tape.parameter(l.wq)), tape.parameter(l.bq));
    ag::Var k = ag::add_row(ag::matmul(a, tape.parameter(l.wk)), tape.parameter(l.bk));
    ag::Var v = ag::add_row(ag::matmul(a, tape.parameter(l.wv)), tape.parameter(l.bv));
    std::vector<ag::Var> heads;
    for (std::size_t h = 0; h < cfg.heads; ++h) {
      const auto c0 = static_cast<Eigen::Index>(h) * dh;
      ag::Var scores = ag::scale(ag::matmul_nt(ag::slice_cols(q, c0, dh), ag::slice_cols(k, c0, dh)), inv_sqrt);
      ag::Var w = ag::softmax_rows(ag::add_const(scores, causal));
      heads.push_back(ag::matmul(w, ag::slice_cols(v, c0, dh)));
    }
    ag::Var attn = ag::add_row(ag::matmul(ag::concat_cols(heads), tape.parameter(l.wo)), tape.parameter(l.bo));
    x = ag::add(x, attn);
    ag::Var m = ag::layer_norm(x, tape.parameter(l.ln2_gain), tape.parameter(l.ln2_bias), cfg.layer_norm_eps);
    ag::Var up = ag::gelu(ag::add_row(ag::matmul(m, tape.parameter(l.w_up)), tape.parameter(l.b_up)));
    x = ag::add(x, ag::add_row(ag::matmul(up, tape.parameter(l.w_down)), tape.parameter(l.b_down)));
  }
  ag::Var final_x = ag::layer_norm(x, tape.parameter(params.final_gain), tape.parameter(params.final_bias),
                                   cfg.layer_norm_eps);

  std::vector<int> rows;
  std::vector<int> targets;
  for (std::size_t p = seq.first_target; p + 1 < len; ++p) {
    rows.push_back(static_cast<int>(p));
    targets.push_back(seq.tokens[p + 1]);
  }
  ag::Var h = ag::select_rows(final_x, rows);
  ag::Var logits = ag::add_row(ag::matmul_nt(h, tape.parameter(params.token_embedding)),
                               tape.parameter(params.output_bias));
  return ag::cross_entropy_rows(logits, targets);
}

GeneratorParams train_generator(std::span<const std::pair<std::vector<TokenId>, std::vector<TokenId>>> pairs,
                                GeneratorConfig cfg) {
  if (pairs.empty()) throw std::invalid_argument("train_generator: no training pairs");
  cfg.validate();
  GeneratorParams params = GeneratorParams::initialize(cfg);

  std::vector<TrainingSequence> seqs;
  std::size_t n_targets = 0;
  for (const auto& [doc, question] : pairs) {
    seqs.push_back(make_training_sequence(doc, question, cfg.max_context));
    if (seqs.back().truncated) ++params.truncated_sequences;
    n_targets += seqs.back().tokens.size() - 1 - seqs.back().first_target;
  }
  if (params.truncated_sequences > 0) {
    std::cerr << "warning: " << params.truncated_sequences
              << " training sequence(s) exceeded max_context; document heads were truncated\n";
  }

  auto param_ptrs = params.parameters();
  AdamW opt(param_ptrs, AdamWConfig{.learning_rate = cfg.learning_rate, .weight_decay = cfg.weight_decay});
  Rng order_rng = make_stream(cfg.seed, "generator-order");
  std::vector<std::size_t> order(seqs.size());
  std::iota(order.begin(), order.end(), 0);

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[uniform_index(order_rng, i)]);
    double epoch_loss = 0.0;
    for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), b + cfg.batch_size);
      std::size_t batch_targets = 0;
      for (std::size_t i = b; i < end; ++i) {
        batch_targets += seqs[order[i]].tokens.size() - 1 - seqs[order[i]].first_target;
      }
      std::vector<Matrix> grads;
      for (const Parameter* p : param_ptrs) grads.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
      for (std::size_t i = b; i < end; ++i) {
        ag::Tape tape;
        ag::Var loss = ag::scale(sequence_loss(tape, params, seqs[order[i]]), 1.0 / static_cast<double>(batch_targets));
        tape.backward(loss);
        epoch_loss += loss.scalar() * static_cast<double>(batch_targets);
        for (std::size_t k = 0; k < param_ptrs.size(); ++k) grads[k] += tape.grad_of(*param_ptrs[k]);
      }
      opt.step(grads);
    }
    params.epoch_losses.push_back(epoch_loss / static_cast<double>(n_targets));
  }
  params.final_loss = params.epoch_losses.back();
  return params;
}

std::size_t argmax_lowest(std::span<const double> values) {
  if (values.empty()) throw std::invalid_argument("argmax of an empty range");
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (values[i] > values[best]) best = i;
  }
  return best;
}

std::vector<TokenId> generate_single(const GeneratorParams& params, std::span<const TokenId> doc, std::size_t max_len) {
  std::vector<TokenId> out;
  if (max_len == 0) return out;
  GeneratorStream stream(params);
  stream.extend(decode_prefix(doc, params.config.max_context, max_len));
  GeneratorStepOutput step = stream.output();
  for (std::size_t t = 0; t < max_len; ++t) {
    const auto tok = static_cast<TokenId>(argmax_lowest(std::span<const double>(step.dist.data(), step.dist.size())));
    if (tok == kEos) break;
    out.push_back(tok);
    if (t + 1 < max_len) step = stream.push(tok);
  }
  return out;
}

}  // namespace mscqg
