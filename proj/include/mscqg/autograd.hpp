// Minimal reverse-mode differentiation over dense row-major double matrices.
//
// A Tape records every intermediate value together with a closure that
// pushes the incoming gradient to its parents. Parameters are referenced,
// not copied, and their gradients are summed per Parameter so that the same
// weight used at several decoding steps receives one accumulated gradient.
#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace mscqg {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::Matrix<double, 1, Eigen::Dynamic, Eigen::RowMajor>;

/// A named trainable tensor.
struct Parameter {
  std::string name;
  Matrix value;
};

namespace ag {

class Tape;

/// Handle to a node recorded on a Tape. Cheap to copy.
class Var {
 public:
  Var() = default;

  [[nodiscard]] const Matrix& value() const;
  [[nodiscard]] Eigen::Index rows() const { return value().rows(); }
  [[nodiscard]] Eigen::Index cols() const { return value().cols(); }
  [[nodiscard]] double scalar() const { return value()(0, 0); }
  [[nodiscard]] Tape* tape() const { return tape_; }
  [[nodiscard]] int id() const { return id_; }
  [[nodiscard]] bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}
  Tape* tape_ = nullptr;
  int id_ = -1;
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Matrix& grad)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value);
  /// Registers (once) a parameter leaf. The tape keeps a pointer; the
  /// parameter must outlive the tape and must not change while it is in use.
  Var parameter(const Parameter& p);

  /// Records a derived node. `fn` is dropped when no parent needs a gradient.
  Var record(Matrix value, std::initializer_list<Var> parents, BackwardFn fn);
  Var record(Matrix value, std::span<const Var> parents, BackwardFn fn);

  /// Runs reverse accumulation from a 1x1 root.
  void backward(Var root);

  [[nodiscard]] const Matrix& value(int id) const;
  [[nodiscard]] bool needs_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].needs_grad; }
  void accumulate(int id, const Matrix& g);
  template <class Expr>
  void accumulate_expr(int id, const Expr& g) {
    auto& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.needs_grad) return;
    if (n.grad.size() == 0) n.grad = Matrix::Zero(value(id).rows(), value(id).cols());
    n.grad += g;
  }

  /// Accumulated gradient of a parameter after backward(); zeros when the
  /// parameter was not reached.
  [[nodiscard]] Matrix grad_of(const Parameter& p) const;

  [[nodiscard]] std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    const Matrix* external = nullptr;
    Matrix grad;
    BackwardFn backward;
    bool needs_grad = false;
  };
  std::vector<Node> nodes_;
  std::unordered_map<const Parameter*, int> param_ids_;
};

// ---- linear algebra --------------------------------------------------------
Var matmul(Var a, Var b);
/// a * b^T
Var matmul_nt(Var a, Var b);
Var transpose(Var a);

// ---- elementwise ----------------------------------------------------------
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
/// Adds a 1xC row to every row of a.
Var add_row(Var a, Var row);
/// Adds a constant matrix (masks, fixed offsets).
Var add_const(Var a, const Matrix& c);
/// Multiplies by a constant matrix elementwise.
Var mul_const(Var a, const Matrix& c);
/// a * s where s is 1x1.
Var mul_scalar(Var a, Var s);
/// a / s where s is 1x1.
Var div_scalar(Var a, Var s);
Var log(Var a);
Var relu(Var a);
/// tanh approximation used by GPT-2.
Var gelu(Var a);

// ---- reductions and reshaping ---------------------------------------------
Var sum(Var a);
Var mean_rows(Var a);
Var pick(Var a, Eigen::Index r, Eigen::Index c);
Var slice_cols(Var a, Eigen::Index c0, Eigen::Index n);
Var concat_cols(std::span<const Var> parts);
Var select_rows(Var a, std::span<const int> rows);
/// Embedding lookup: one output row per id.
Var gather_rows(Var table, std::span<const int> ids);

// ---- normalisation --------------------------------------------------------
Var softmax_rows(Var a);
Var layer_norm(Var x, Var gamma, Var beta, double eps);

// ---- fused losses ---------------------------------------------------------
/// Sum over rows of -log softmax(logits)[row, target[row]].
Var cross_entropy_rows(Var logits, std::span<const int> targets);
/// Sum of x log x over all entries, with 0 log 0 = 0.
Var neg_entropy(Var a);
/// max(p, eps) renormalised to unit sum; entries below eps are constant.
Var floor_renorm(Var row, double eps);
/// Sum over the rows p_i of `refs` of KL(q||p_i) + KL(p_i||q). `q` is a
/// strictly positive 1xV row, `refs` rows are strictly positive constants.
Var symmetric_kl_sum(Var q, const Matrix& refs);

}  // namespace ag
}  // namespace mscqg
