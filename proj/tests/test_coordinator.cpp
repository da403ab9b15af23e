#include "gradcheck.hpp"
#include "mscqg/coordinator.hpp"
#include "mscqg/rng.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <limits>

using namespace mscqg;
using mscqg::testing::check_gradients;
using mscqg::testing::max_relative_error;

namespace {

CoordinatorConfig tiny_coord() {
  CoordinatorConfig cfg;
  cfg.hidden = 8;
  cfg.blocks = 1;
  cfg.heads = 2;
  cfg.seed = 4;
  return cfg;
}

Matrix random_matrix(Eigen::Index r, Eigen::Index c, Rng& rng, double scale = 1.0) {
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * standard_normal(rng);
  return m;
}

Matrix random_dists(Eigen::Index r, Eigen::Index v, Rng& rng, double zero_prob = 0.0) {
  Matrix m(r, v);
  for (Eigen::Index i = 0; i < r; ++i) {
    for (Eigen::Index j = 0; j < v; ++j) m(i, j) = uniform01(rng) < zero_prob ? 0.0 : uniform01(rng);
    if (m.row(i).sum() == 0.0) m(i, static_cast<Eigen::Index>(uniform_index(rng, static_cast<std::uint64_t>(v)))) = 1.0;
    m.row(i) /= m.row(i).sum();
  }
  return m;
}

RowVector random_simplex(Eigen::Index n, Rng& rng) {
  RowVector w(n);
  for (Eigen::Index i = 0; i < n; ++i) w(i) = uniform01(rng) + 1e-3;
  return w / w.sum();
}

void perturb(CoordinatorParams& p, double scale, std::uint64_t seed) {
  Rng rng = make_stream(seed, "perturb");
  for (Parameter* q : p.parameters()) {
    for (Eigen::Index i = 0; i < q->value.size(); ++i) q->value.data()[i] += scale * standard_normal(rng);
  }
}

std::vector<Membership> members(std::size_t pos, std::size_t neg) {
  std::vector<Membership> m(pos, Membership::kPositive);
  m.insert(m.end(), neg, Membership::kNegative);
  return m;
}

GeneratorConfig tiny_gen() {
  GeneratorConfig cfg;
  cfg.vocab_size = 17;
  cfg.hidden = 8;
  cfg.layers = 1;
  cfg.heads = 2;
  cfg.max_context = 32;
  cfg.seed = 2;
  return cfg;
}

ContrastiveInstance tiny_instance(std::size_t pos, std::size_t neg) {
  ContrastiveInstance inst;
  inst.id = "toy";
  for (std::size_t i = 0; i < pos + neg; ++i) {
    Document d;
    d.id = "d" + std::to_string(i);
    d.text = d.id;
    d.tokens = {static_cast<TokenId>(4 + i % 13), static_cast<TokenId>(5 + (3 * i) % 12), 7};
    (i < pos ? inst.positive_docs : inst.negative_docs).push_back(d);
  }
  return inst;
}

}  // namespace

TEST_CASE("eta: fixed points, range and monotonicity") {
  CHECK(eta(0.0) == -0.25);
  CHECK(eta(1000.0) > -1.0);
  CHECK(eta(-1000.0) < 0.5);
  CHECK(eta(40.0) == doctest::Approx(-1.0));
  CHECK(eta(-40.0) == doctest::Approx(0.5));
  CHECK_THROWS(eta(std::numeric_limits<double>::infinity()));

  Rng rng = make_stream(1, "eta");
  std::vector<double> z(1'000'000);
  for (auto& x : z) x = 20.0 * standard_normal(rng);
  std::sort(z.begin(), z.end());
  double prev = std::numeric_limits<double>::infinity();
  bool in_range = true, monotone = true;
  for (double x : z) {
    const double e = eta(x);
    in_range = in_range && e > -1.0 && e < 0.5;
    monotone = monotone && e <= prev;
    prev = e;
  }
  CHECK(in_range);
  CHECK(monotone);
  // Strict decrease where the sigmoid is not saturated.
  CHECK(eta(0.1) < eta(0.0));
  CHECK(eta_derivative(0.0) == doctest::Approx(-0.75));
}

TEST_CASE("coordinator heads are normalised and pure") {
  auto params = CoordinatorParams::initialize(tiny_coord());
  Rng rng = make_stream(2, "test");
  const Matrix h = random_matrix(5, 8, rng);
  const auto m = members(3, 2);
  auto a = coordinator_forward(params, h, m);
  auto b = coordinator_forward(params, h, m);
  CHECK(a.w.size() == 3);
  CHECK(a.v.size() == 2);
  CHECK(std::abs(a.w.sum() - 1.0) < 1e-12);
  CHECK(std::abs(a.v.sum() - 1.0) < 1e-12);
  CHECK(a.eta == eta(a.z));
  CHECK(a.w == b.w);
  CHECK(a.v == b.v);
  CHECK(a.z == b.z);

  auto no_neg = coordinator_forward(params, h.topRows(3), members(3, 0));
  CHECK(no_neg.v.size() == 0);
  CHECK(std::abs(no_neg.w.sum() - 1.0) < 1e-12);
}

TEST_CASE("coordinator rejects malformed input") {
  auto params = CoordinatorParams::initialize(tiny_coord());
  CHECK_THROWS(coordinator_forward(params, Matrix::Zero(2, 7), members(1, 1)));
  CHECK_THROWS(coordinator_forward(params, Matrix::Zero(2, 8), members(1, 2)));
  CHECK_THROWS(coordinator_forward(params, Matrix::Zero(2, 8), members(0, 2)));
  auto cfg = tiny_coord();
  cfg.heads = 3;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}

TEST_CASE("swapping two positive documents swaps their weights") {
  auto params = CoordinatorParams::initialize(tiny_coord());
  perturb(params, 0.3, 5);
  Rng rng = make_stream(3, "test");
  const Matrix h = random_matrix(6, 8, rng);
  const auto m = members(4, 2);
  Matrix swapped = h;
  swapped.row(0) = h.row(2);
  swapped.row(2) = h.row(0);
  auto a = coordinator_forward(params, h, m);
  auto b = coordinator_forward(params, swapped, m);
  CHECK(std::abs(a.w(0) - b.w(2)) < 1e-12);
  CHECK(std::abs(a.w(2) - b.w(0)) < 1e-12);
  CHECK(std::abs(a.w(1) - b.w(1)) < 1e-12);
  CHECK((a.v - b.v).cwiseAbs().maxCoeff() < 1e-12);
  CHECK(std::abs(a.z - b.z) < 1e-12);
}

TEST_CASE("aggregate: three-token hand example") {
  CoordinatorStepOutput step;
  step.w = RowVector::Ones(1);
  step.v = RowVector::Ones(1);
  step.eta = 0.5;
  Matrix pos(1, 3), neg(1, 3);
  pos << 0.6, 0.3, 0.1;
  neg << 0.1, 0.3, 0.6;
  auto agg = aggregate(step, pos, neg);
  CHECK_FALSE(agg.fallback_used);
  CHECK(agg.normalizer == doctest::Approx(0.7));
  CHECK(agg.probs(0) == doctest::Approx(0.7857).epsilon(1e-4));
  CHECK(agg.probs(1) == doctest::Approx(0.2143).epsilon(1e-4));
  CHECK(agg.probs(2) == 0.0);
  CHECK(agg.keep(2) == 0.0);
}

TEST_CASE("aggregate: degenerate cases") {
  Rng rng = make_stream(4, "test");
  const Matrix pos = random_dists(3, 9, rng);
  const Matrix neg = random_dists(2, 9, rng);
  CoordinatorStepOutput step;
  step.w = random_simplex(3, rng);
  step.v = random_simplex(2, rng);

  SUBCASE("eta zero ignores the negative set") {
    step.eta = 0.0;
    auto agg = aggregate(step, pos, neg);
    CHECK((agg.probs - step.w * pos).cwiseAbs().maxCoeff() < 1e-15);
  }
  SUBCASE("identical sets with eta one half return the shared distribution") {
    CoordinatorStepOutput same;
    same.w = RowVector::Ones(1);
    same.v = RowVector::Ones(1);
    same.eta = 0.5;
    auto agg = aggregate(same, pos.topRows(1), pos.topRows(1));
    CHECK_FALSE(agg.fallback_used);
    CHECK((agg.probs - pos.row(0)).cwiseAbs().maxCoeff() < 1e-15);
  }
  SUBCASE("vanishing mass falls back to the positive mix") {
    // Only reachable outside the eta range: eta = 1 with identical sets
    // cancels every token.
    CoordinatorStepOutput s;
    s.w = RowVector::Ones(1);
    s.v = RowVector::Ones(1);
    s.eta = 1.0;
    auto agg = aggregate(s, pos.topRows(1), pos.topRows(1));
    CHECK(agg.fallback_used);
    CHECK(agg.probs == RowVector(pos.row(0)));
  }
  SUBCASE("vocabulary mismatch throws") {
    step.eta = 0.1;
    CHECK_THROWS(aggregate(step, pos, neg.leftCols(8)));
  }
}

TEST_CASE("aggregate fuzz: always a distribution, argmax unaffected by normalisation") {
  Rng rng = make_stream(6, "fuzz");
  for (int trial = 0; trial < 10000; ++trial) {
    const auto p = static_cast<Eigen::Index>(1 + uniform_index(rng, 5));
    const auto n = static_cast<Eigen::Index>(uniform_index(rng, 5));
    const auto v = static_cast<Eigen::Index>(2 + uniform_index(rng, 12));
    CoordinatorStepOutput step;
    step.w = random_simplex(p, rng);
    if (n > 0) step.v = random_simplex(n, rng);
    step.eta = eta(10.0 * standard_normal(rng));
    const Matrix pos = random_dists(p, v, rng, 0.3);
    const Matrix neg = random_dists(n, v, rng, 0.3);
    auto agg = aggregate(step, pos, neg);
    REQUIRE(agg.probs.minCoeff() >= 0.0);
    REQUIRE(std::abs(agg.probs.sum() - 1.0) < 1e-9);
    if (!agg.fallback_used) {
      RowVector raw = step.w * pos;
      if (n > 0) raw -= step.eta * (step.v * neg);
      const RowVector kept = raw.cwiseMax(0.0);
      Eigen::Index a = 0, b = 0;
      kept.maxCoeff(&a);
      agg.probs.maxCoeff(&b);
      REQUIRE(a == b);
    }
  }
}

TEST_CASE("coordinator gradients match central differences") {
  auto params = CoordinatorParams::initialize(tiny_coord());
  perturb(params, 0.3, 7);
  Rng rng = make_stream(8, "test");
  constexpr int T = 3;
  const auto m = members(2, 2);
  std::vector<Matrix> hidden, pos, neg;
  std::vector<int> tokens;
  for (int t = 0; t < T; ++t) {
    hidden.push_back(random_matrix(4, 8, rng));
    pos.push_back(random_dists(2, 17, rng));
    neg.push_back(random_dists(2, 17, rng));
  }
  // Truncation masks and chosen tokens come from the unperturbed forward pass.
  std::vector<RowVector> keep;
  for (int t = 0; t < T; ++t) {
    auto step = coordinator_forward(params, hidden[t], m);
    auto agg = aggregate(step, pos[t], neg[t]);
    REQUIRE_FALSE(agg.fallback_used);
    keep.push_back(agg.keep);
    Eigen::Index best = 0;
    agg.probs.maxCoeff(&best);
    tokens.push_back(static_cast<int>(best));
  }
  auto checks = check_gradients(params.parameters(), [&](ag::Tape& tape) {
    ag::Var loss = tape.constant(Matrix::Zero(1, 1));
    for (int t = 0; t < T; ++t) {
      auto vars = coordinator_graph(tape, params, hidden[t], m);
      ag::Var probs = aggregate_graph(vars, pos[t], neg[t], keep[t], false);
      loss = ag::sub(loss, ag::log(ag::pick(probs, 0, tokens[t])));
      loss = ag::add(loss, ag::add(ag::neg_entropy(vars.w), ag::neg_entropy(vars.v)));
    }
    return loss;
  });
  for (const auto& c : checks) INFO(c.name << " rel err " << c.relative_error);
  CHECK(max_relative_error(checks) <= 1e-4);
}

TEST_CASE("decode_common: determinism, length bound, null-neg") {
  auto gen = GeneratorParams::initialize(tiny_gen());
  auto coord = CoordinatorParams::initialize(tiny_coord());
  perturb(coord, 0.2, 9);
  const auto inst = tiny_instance(3, 2);

  DecodeOptions greedy;
  auto a = decode_common(gen, coord, inst, greedy);
  auto b = decode_common(gen, coord, inst, greedy);
  CHECK(a.question == b.question);
  CHECK(a.length() <= 20);
  CHECK(a.length() >= 1);
  CHECK((a.steps.back().token == kEos || a.length() == 20));
  CHECK(a.membership().size() == 5);
  for (const auto& s : a.steps) {
    CHECK(std::abs(s.agg.probs.sum() - 1.0) < 1e-9);
    CHECK(s.hidden.rows() == 5);
  }

  DecodeOptions short_opts;
  short_opts.max_len = 3;
  CHECK(decode_common(gen, coord, inst, short_opts).length() <= 3);

  DecodeOptions null_neg;
  null_neg.null_neg = true;
  auto c = decode_common(gen, coord, inst, null_neg);
  for (const auto& s : c.steps) {
    CHECK(s.neg_dists.rows() == 0);
    CHECK((s.agg.probs - s.coord.w * s.pos_dists).cwiseAbs().maxCoeff() < 1e-15);
  }

  Rng r1 = make_stream(3, "rollout"), r2 = make_stream(3, "rollout");
  DecodeOptions s1, s2;
  s1.sample = s2.sample = true;
  s1.rng = &r1;
  s2.rng = &r2;
  auto x = decode_common(gen, coord, inst, s1);
  auto y = decode_common(gen, coord, inst, s2);
  CHECK(x.question == y.question);
  for (const auto& s : x.steps) CHECK(std::isfinite(s.log_prob));
}

TEST_CASE("decode matches recomputing every context from scratch") {
  auto gen = GeneratorParams::initialize(tiny_gen());
  auto coord = CoordinatorParams::initialize(tiny_coord());
  const auto inst = tiny_instance(2, 2);
  auto trace = decode_common(gen, coord, inst, DecodeOptions{});
  std::vector<const Document*> docs = {&inst.positive_docs[0], &inst.positive_docs[1], &inst.negative_docs[0],
                                       &inst.negative_docs[1]};
  for (std::size_t t = 0; t < trace.steps.size(); ++t) {
    for (std::size_t i = 0; i < docs.size(); ++i) {
      auto ctx = decode_prefix(docs[i]->tokens, gen.config.max_context, 20);
      for (std::size_t k = 0; k < t; ++k) ctx.push_back(trace.steps[k].token);
      auto out = generator_step(gen, ctx);
      const RowVector& got = i < 2 ? RowVector(trace.steps[t].pos_dists.row(static_cast<Eigen::Index>(i)))
                                   : RowVector(trace.steps[t].neg_dists.row(static_cast<Eigen::Index>(i - 2)));
      CHECK((got - out.dist).cwiseAbs().maxCoeff() < 1e-12);
    }
  }
}

TEST_CASE("choose_token: greedy ties and sampling support") {
  RowVector p(4);
  p << 0.1, 0.4, 0.4, 0.1;
  CHECK(choose_token(p, DecodeOptions{}) == 1);
  RowVector q(4);
  q << 0.0, 0.5, 0.0, 0.5;
  Rng rng = make_stream(1, "rollout");
  DecodeOptions s;
  s.sample = true;
  s.rng = &rng;
  s.temperature = 0.7;
  for (int i = 0; i < 500; ++i) {
    const TokenId t = choose_token(q, s);
    CHECK((t == 1 || t == 3));
  }
  s.rng = nullptr;
  CHECK_THROWS(choose_token(q, s));
}
