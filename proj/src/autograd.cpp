#include "mscqg/autograd.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace mscqg::ag {

const Matrix& Var::value() const { return tape_->value(id_); }

Var Tape::constant(Matrix value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Tape::parameter(const Parameter& p) {
  if (auto it = param_ids_.find(&p); it != param_ids_.end()) return Var(this, it->second);
  Node n;
  n.external = &p.value;
  n.needs_grad = true;
  nodes_.push_back(std::move(n));
  const int id = static_cast<int>(nodes_.size() - 1);
  param_ids_.emplace(&p, id);
  return Var(this, id);
}

Var Tape::record(Matrix value, std::initializer_list<Var> parents, BackwardFn fn) {
  return record(std::move(value), std::span<const Var>(parents.begin(), parents.size()), std::move(fn));
}

Var Tape::record(Matrix value, std::span<const Var> parents, BackwardFn fn) {
  Node n;
  n.value = std::move(value);
  for (const Var& p : parents) {
    if (p.tape() != this) throw std::invalid_argument("autograd: mixing tapes");
    n.needs_grad = n.needs_grad || nodes_[static_cast<std::size_t>(p.id())].needs_grad;
  }
  if (n.needs_grad) n.backward = std::move(fn);
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

const Matrix& Tape::value(int id) const {
  const Node& n = nodes_[static_cast<std::size_t>(id)];
  return n.external != nullptr ? *n.external : n.value;
}

void Tape::accumulate(int id, const Matrix& g) { accumulate_expr(id, g); }

void Tape::backward(Var root) {
  if (root.tape() != this) throw std::invalid_argument("autograd: root from another tape");
  if (root.rows() != 1 || root.cols() != 1) throw std::invalid_argument("autograd: backward root must be 1x1");
  for (auto& n : nodes_) n.grad.resize(0, 0);
  accumulate(root.id(), Matrix::Ones(1, 1));
  for (int i = root.id(); i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (!n.backward || n.grad.size() == 0) continue;
    // Copy: the closure may not touch node i, but keep the reference stable.
    const Matrix g = n.grad;
    n.backward(*this, g);
  }
}

Matrix Tape::grad_of(const Parameter& p) const {
  auto it = param_ids_.find(&p);
  if (it == param_ids_.end()) return Matrix::Zero(p.value.rows(), p.value.cols());
  const Node& n = nodes_[static_cast<std::size_t>(it->second)];
  if (n.grad.size() == 0) return Matrix::Zero(p.value.rows(), p.value.cols());
  return n.grad;
}

namespace {

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument(std::string("autograd: shape mismatch in ") + op);
  }
}

void require_scalar(const Var& s, const char* op) {
  if (s.rows() != 1 || s.cols() != 1) throw std::invalid_argument(std::string("autograd: expected 1x1 in ") + op);
}

}  // namespace

Var matmul(Var a, Var b) {
  if (a.cols() != b.rows()) throw std::invalid_argument("autograd: matmul shape mismatch");
  Matrix out = a.value() * b.value();
  const int ia = a.id(), ib = b.id();
  return a.tape()->record(std::move(out), {a, b}, [ia, ib](Tape& t, const Matrix& g) {
    if (t.needs_grad(ia)) t.accumulate_expr(ia, g * t.value(ib).transpose());
    if (t.needs_grad(ib)) t.accumulate_expr(ib, t.value(ia).transpose() * g);
  });
}

Var matmul_nt(Var a, Var b) {
  if (a.cols() != b.cols()) throw std::invalid_argument("autograd: matmul_nt shape mismatch");
  Matrix out = a.value() * b.value().transpose();
  const int ia = a.id(), ib = b.id();
  return a.tape()->record(std::move(out), {a, b}, [ia, ib](Tape& t, const Matrix& g) {
    if (t.needs_grad(ia)) t.accumulate_expr(ia, g * t.value(ib));
    if (t.needs_grad(ib)) t.accumulate_expr(ib, g.transpose() * t.value(ia));
  });
}

Var transpose(Var a) {
  Matrix out = a.value().transpose();
  const int ia = a.id();
  return a.tape()->record(std::move(out), {a},
                          [ia](Tape& t, const Matrix& g) { t.accumulate_expr(ia, g.transpose()); });
}

Var add(Var a, Var b) {
  require_same_shape(a, b, "add");
  Matrix out = a.value() + b.value();
  const int ia = a.id(), ib = b.id();
  return a.tape()->record(std::move(out), {a, b}, [ia, ib](Tape& t, const Matrix& g) {
    t.accumulate(ia, g);
    t.accumulate(ib, g);
  });
}

Var sub(Var a, Var b) {
  require_same_shape(a, b, "sub");
  Matrix out = a.value() - b.value();
  const int ia = a.id(), ib = b.id();
  return a.tape()->record(std::move(out), {a, b}, [ia, ib](Tape& t, const Matrix& g) {
    t.accumulate(ia, g);
    t.accumulate_expr(ib, -g);
  });
}

Var mul(Var a, Var b) {
  require_same_shape(a, b, "mul");
  Matrix out = a.value().cwiseProduct(b.value());
  const int ia = a.id(), ib = b.id();
  return a.tape()->record(std::move(out), {a, b}, [ia, ib](Tape& t, const Matrix& g) {
    if (t.needs_grad(ia)) t.accumulate_expr(ia, g.cwiseProduct(t.value(ib)));
    if (t.needs_grad(ib)) t.accumulate_expr(ib, g.cwiseProduct(t.value(ia)));
  });
}

Var scale(Var a, double s) {
  Matrix out = a.value() * s;
  const int ia = a.id();
  return a.tape()->record(std::move(out), {a}, [ia, s](Tape& t, const Matrix& g) { t.accumulate_expr(ia, g * s); });
}

Var add_row(Var a, Var row) {
  if (row.rows() != 1 || row.cols() != a.cols()) throw std::invalid_argument("autograd: add_row shape mismatch");
  Matrix out = a.value().rowwise() + row.value().row(0);
  const int ia = a.id(), ir = row.id();
  return a.tape()->record(std::move(out), {a, row}, [ia, ir](Tape& t, const Matrix& g) {
    t.accumulate(ia, g);
    if (t.needs_grad(ir)) t.accumulate_expr(ir, g.colwise().sum());
  });
}

Var add_const(Var a, const Matrix& c) {
  if (c.rows() != a.rows() || c.cols() != a.cols()) throw std::invalid_argument("autograd: add_const shape mismatch");
  Matrix out = a.value() + c;
  const int ia = a.id();
  return a.tape()->record(std::move(out), {a}, [ia](Tape& t, const Matrix& g) { t.accumulate(ia, g); });
}

Var mul_const(Var a, const Matrix& c) {
  if (c.rows() != a.rows() || c.cols() != a.cols()) throw std::invalid_argument("autograd: mul_const shape mismatch");
  Matrix out = a.value().cwiseProduct(c);
  const int ia = a.id();
  return a.tape()->record(std::move(out), {a},
                          [ia, c](Tape& t, const Matrix& g) { t.accumulate_expr(ia, g.cwiseProduct(c)); });
}

Var mul_scalar(Var a, Var s) {
  require_scalar(s, "mul_scalar");
  Matrix out = a.value() * s.scalar();
  const int ia = a.id(), is = s.id();
  return a.tape()->record(std::move(out), {a, s}, [ia, is](Tape& t, const Matrix& g) {
    const double sv = t.value(is)(0, 0);
    if (t.needs_grad(ia)) t.accumulate_expr(ia, g * sv);
    if (t.needs_grad(is)) t.accumulate(is, Matrix::Constant(1, 1, g.cwiseProduct(t.value(ia)).sum()));
  });
}

Var div_scalar(Var a, Var s) {
  require_scalar(s, "div_scalar");
  Matrix out = a.value() / s.scalar();
  const int ia = a.id(), is = s.id();
  return a.tape()->record(std::move(out), {a, s}, [ia, is](Tape& t, const Matrix& g) {
    const double sv = t.value(is)(0, 0);
    if (t.needs_grad(ia)) t.accumulate_expr(ia, g / sv);
    if (t.needs_grad(is)) {
      t.accumulate(is, Matrix::Constant(1, 1, -g.cwiseProduct(t.value(ia)).sum() / (sv * sv)));
    }
  });
}

Var log(Var a) {
  Matrix out = a.value().array().log().matrix();
  const int ia = a.id();
  return a.tape()->record(std::move(out), {a}, [ia](Tape& t, const Matrix& g) {
    t.accumulate_expr(ia, g.cwiseQuotient(t.value(ia)));
  });
}

Var relu(Var a) {
  Matrix out = a.value().cwiseMax(0.0);
  const int ia = a.id();
  return a.tape()->record(std::move(out), {a}, [ia](Tape& t, const Matrix& g) {
    t.accumulate_expr(ia, g.cwiseProduct((t.value(ia).array() > 0.0).cast<double>().matrix()));
  });
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
}  // namespace

Var gelu(Var a) {
  const Matrix& x = a.value();
  Matrix out(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double v = x.data()[i];
    out.data()[i] = 0.5 * v * (1.0 + std::tanh(kGeluC * (v + kGeluA * v * v * v)));
  }
  const int ia = a.id();
  return a.tape()->record(std::move(out), {a}, [ia](Tape& t, const Matrix& g) {
    const Matrix& xv = t.value(ia);
    Matrix d(xv.rows(), xv.cols());
    for (Eigen::Index i = 0; i < xv.size(); ++i) {
      const double v = xv.data()[i];
      const double th = std::tanh(kGeluC * (v + kGeluA * v * v * v));
      const double du = kGeluC * (1.0 + 3.0 * kGeluA * v * v);
      d.data()[i] = g.data()[i] * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * du);
    }
    t.accumulate(ia, d);
  });
}

Var sum(Var a) {
  Matrix out = Matrix::Constant(1, 1, a.value().sum());
  const int ia = a.id();
  const auto r = a.rows(), c = a.cols();
  return a.tape()->record(std::move(out), {a}, [ia, r, c](Tape& t, const Matrix& g) {
    t.accumulate_expr(ia, Matrix::Constant(r, c, g(0, 0)));
  });
}

Var mean_rows(Var a) {
  Matrix out = a.value().colwise().mean();
  const int ia = a.id();
  const auto r = a.rows();
  return a.tape()->record(std::move(out), {a}, [ia, r](Tape& t, const Matrix& g) {
    t.accumulate_expr(ia, g.replicate(r, 1) / static_cast<double>(r));
  });
}

Var pick(Var a, Eigen::Index r, Eigen::Index c) {
  if (r < 0 || c < 0 || r >= a.rows() || c >= a.cols()) throw std::out_of_range("autograd: pick index");
  Matrix out = Matrix::Constant(1, 1, a.value()(r, c));
  const int ia = a.id();
  const auto rows = a.rows(), cols = a.cols();
  return a.tape()->record(std::move(out), {a}, [ia, r, c, rows, cols](Tape& t, const Matrix& g) {
    Matrix d = Matrix::Zero(rows, cols);
    d(r, c) = g(0, 0);
    t.accumulate(ia, d);
  });
}

Var slice_cols(Var a, Eigen::Index c0, Eigen::Index n) {
  if (c0 < 0 || n < 0 || c0 + n > a.cols()) throw std::out_of_range("autograd: slice_cols range");
  Matrix out = a.value().middleCols(c0, n);
  const int ia = a.id();
  const auto rows = a.rows(), cols = a.cols();
  return a.tape()->record(std::move(out), {a}, [ia, c0, n, rows, cols](Tape& t, const Matrix& g) {
    Matrix d = Matrix::Zero(rows, cols);
    d.middleCols(c0, n) = g;
    t.accumulate(ia, d);
  });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("autograd: concat of nothing");
  const auto rows = parts.front().rows();
  Eigen::Index total = 0;
  for (const Var& p : parts) {
    if (p.rows() != rows) throw std::invalid_argument("autograd: concat_cols row mismatch");
    total += p.cols();
  }
  Matrix out(rows, total);
  std::vector<int> ids;
  std::vector<Eigen::Index> offsets;
  Eigen::Index off = 0;
  for (const Var& p : parts) {
    out.middleCols(off, p.cols()) = p.value();
    ids.push_back(p.id());
    offsets.push_back(off);
    off += p.cols();
  }
  Tape* tape = parts.front().tape();
  return tape->record(std::move(out), parts, [ids, offsets](Tape& t, const Matrix& g) {
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (!t.needs_grad(ids[k])) continue;
      t.accumulate_expr(ids[k], g.middleCols(offsets[k], t.value(ids[k]).cols()));
    }
  });
}

Var select_rows(Var a, std::span<const int> rows) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), a.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= a.rows()) throw std::out_of_range("autograd: select_rows index");
    out.row(static_cast<Eigen::Index>(i)) = a.value().row(rows[i]);
  }
  const int ia = a.id();
  std::vector<int> idx(rows.begin(), rows.end());
  const auto r = a.rows(), c = a.cols();
  return a.tape()->record(std::move(out), {a}, [ia, idx, r, c](Tape& t, const Matrix& g) {
    Matrix d = Matrix::Zero(r, c);
    for (std::size_t i = 0; i < idx.size(); ++i) d.row(idx[i]) += g.row(static_cast<Eigen::Index>(i));
    t.accumulate(ia, d);
  });
}

Var gather_rows(Var table, std::span<const int> ids) { return select_rows(table, ids); }

Var softmax_rows(Var a) {
  const Matrix& x = a.value();
  Matrix out(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double m = x.row(r).maxCoeff();
    out.row(r) = (x.row(r).array() - m).exp().matrix();
    out.row(r) /= out.row(r).sum();
  }
  const int ia = a.id();
  Matrix y = out;
  return a.tape()->record(std::move(out), {a}, [ia, y = std::move(y)](Tape& t, const Matrix& g) {
    Matrix d(y.rows(), y.cols());
    for (Eigen::Index r = 0; r < y.rows(); ++r) {
      const double dot = g.row(r).dot(y.row(r));
      d.row(r) = y.row(r).cwiseProduct((g.row(r).array() - dot).matrix());
    }
    t.accumulate(ia, d);
  });
}

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
  const Matrix& xv = x.value();
  const auto rows = xv.rows(), cols = xv.cols();
  if (gamma.rows() != 1 || gamma.cols() != cols || beta.rows() != 1 || beta.cols() != cols) {
    throw std::invalid_argument("autograd: layer_norm parameter shape");
  }
  Matrix xhat(rows, cols);
  std::vector<double> inv_std(static_cast<std::size_t>(rows));
  for (Eigen::Index r = 0; r < rows; ++r) {
    const double mu = xv.row(r).mean();
    const double var = (xv.row(r).array() - mu).square().mean();
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[static_cast<std::size_t>(r)] = is;
    xhat.row(r) = (xv.row(r).array() - mu).matrix() * is;
  }
  Matrix out = (xhat.array().rowwise() * gamma.value().row(0).array()).matrix();
  out.rowwise() += beta.value().row(0);
  const int ix = x.id(), ig = gamma.id(), ib = beta.id();
  return x.tape()->record(std::move(out), {x, gamma, beta},
                          [ix, ig, ib, xhat, inv_std](Tape& t, const Matrix& g) {
                            if (t.needs_grad(ib)) t.accumulate_expr(ib, g.colwise().sum());
                            if (t.needs_grad(ig)) t.accumulate_expr(ig, g.cwiseProduct(xhat).colwise().sum());
                            if (!t.needs_grad(ix)) return;
                            const Matrix& gam = t.value(ig);
                            Matrix d(g.rows(), g.cols());
                            for (Eigen::Index r = 0; r < g.rows(); ++r) {
                              RowVector dxhat = g.row(r).cwiseProduct(gam.row(0));
                              const double m1 = dxhat.mean();
                              const double m2 = dxhat.cwiseProduct(xhat.row(r)).mean();
                              d.row(r) = (dxhat.array() - m1 - xhat.row(r).array() * m2).matrix() *
                                         inv_std[static_cast<std::size_t>(r)];
                            }
                            t.accumulate(ix, d);
                          });
}

Var cross_entropy_rows(Var logits, std::span<const int> targets) {
  const Matrix& x = logits.value();
  if (static_cast<Eigen::Index>(targets.size()) != x.rows()) {
    throw std::invalid_argument("autograd: cross_entropy target count");
  }
  Matrix probs(x.rows(), x.cols());
  double loss = 0.0;
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const int tgt = targets[static_cast<std::size_t>(r)];
    if (tgt < 0 || tgt >= x.cols()) throw std::out_of_range("autograd: cross_entropy target");
    const double m = x.row(r).maxCoeff();
    probs.row(r) = (x.row(r).array() - m).exp().matrix();
    const double z = probs.row(r).sum();
    probs.row(r) /= z;
    loss += (m + std::log(z)) - x(r, tgt);
  }
  const int il = logits.id();
  std::vector<int> tg(targets.begin(), targets.end());
  return logits.tape()->record(Matrix::Constant(1, 1, loss), {logits},
                               [il, probs = std::move(probs), tg](Tape& t, const Matrix& g) {
                                 Matrix d = probs;
                                 for (std::size_t r = 0; r < tg.size(); ++r) d(static_cast<Eigen::Index>(r), tg[r]) -= 1.0;
                                 t.accumulate_expr(il, d * g(0, 0));
                               });
}

Var neg_entropy(Var a) {
  const Matrix& x = a.value();
  double s = 0.0;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double v = x.data()[i];
    if (v > 0.0) s += v * std::log(v);
  }
  const int ia = a.id();
  return a.tape()->record(Matrix::Constant(1, 1, s), {a}, [ia](Tape& t, const Matrix& g) {
    const Matrix& xv = t.value(ia);
    Matrix d(xv.rows(), xv.cols());
    for (Eigen::Index i = 0; i < xv.size(); ++i) {
      const double v = xv.data()[i];
      d.data()[i] = v > 0.0 ? g(0, 0) * (std::log(v) + 1.0) : 0.0;
    }
    t.accumulate(ia, d);
  });
}

Var floor_renorm(Var row, double eps) {
  const Matrix& p = row.value();
  Matrix m = p.cwiseMax(eps);
  const double total = m.sum();
  Matrix out = m / total;
  const int ir = row.id();
  return row.tape()->record(std::move(out), {row}, [ir, m, total, eps](Tape& t, const Matrix& g) {
    const Matrix& pv = t.value(ir);
    const double gm = g.cwiseProduct(m).sum() / (total * total);
    Matrix d(pv.rows(), pv.cols());
    for (Eigen::Index i = 0; i < pv.size(); ++i) {
      d.data()[i] = pv.data()[i] >= eps ? g.data()[i] / total - gm : 0.0;
    }
    t.accumulate(ir, d);
  });
}

Var symmetric_kl_sum(Var q, const Matrix& refs) {
  const Matrix& qv = q.value();
  if (qv.rows() != 1 || refs.cols() != qv.cols()) throw std::invalid_argument("autograd: symmetric_kl_sum shape");
  const RowVector logq = qv.array().log().matrix();
  double total = 0.0;
  for (Eigen::Index i = 0; i < refs.rows(); ++i) {
    const RowVector logp = refs.row(i).array().log().matrix();
    total += (qv.row(0).array() * (logq - logp).array()).sum();
    total += (refs.row(i).array() * (logp - logq).array()).sum();
  }
  const int iq = q.id();
  return q.tape()->record(Matrix::Constant(1, 1, total), {q}, [iq, refs](Tape& t, const Matrix& g) {
    const Matrix& qv2 = t.value(iq);
    const RowVector logq2 = qv2.array().log().matrix();
    RowVector d = RowVector::Zero(qv2.cols());
    for (Eigen::Index i = 0; i < refs.rows(); ++i) {
      d.array() += logq2.array() - refs.row(i).array().log() + 1.0 - refs.row(i).array() / qv2.row(0).array();
    }
    t.accumulate_expr(iq, d * g(0, 0));
  });
}

}  // namespace mscqg::ag
