// Central finite-difference gradient checking shared by the test suites.
#pragma once

#include "mscqg/autograd.hpp"

#include <algorithm>
#include <functional>
#include <string>
#include <vector>

namespace mscqg::testing {

struct TensorCheck {
  std::string name;
  double relative_error = 0.0;
  double analytic_norm = 0.0;
};

/// Relative error per parameter tensor: |analytic - numeric| / max(|analytic|, |numeric|),
/// with norms over the whole tensor. Tensors whose gradients are both below `floor` report 0.
inline std::vector<TensorCheck> check_gradients(const std::vector<Parameter*>& params,
                                                const std::function<ag::Var(ag::Tape&)>& build,
                                                double step = 1e-4, double floor = 1e-10) {
  std::vector<Matrix> analytic;
  {
    ag::Tape tape;
    ag::Var loss = build(tape);
    tape.backward(loss);
    for (const Parameter* p : params) analytic.push_back(tape.grad_of(*p));
  }
  auto eval = [&] {
    ag::Tape tape;
    return build(tape).scalar();
  };
  std::vector<TensorCheck> out;
  for (std::size_t k = 0; k < params.size(); ++k) {
    Matrix& w = params[k]->value;
    Matrix numeric(w.rows(), w.cols());
    for (Eigen::Index i = 0; i < w.size(); ++i) {
      const double orig = w.data()[i];
      w.data()[i] = orig + step;
      const double up = eval();
      w.data()[i] = orig - step;
      const double down = eval();
      w.data()[i] = orig;
      numeric.data()[i] = (up - down) / (2.0 * step);
    }
    const double diff = (analytic[k] - numeric).norm();
    const double scale = std::max(analytic[k].norm(), numeric.norm());
    out.push_back({params[k]->name, scale < floor ? 0.0 : diff / scale, analytic[k].norm()});
  }
  return out;
}

inline double max_relative_error(const std::vector<TensorCheck>& checks) {
  double m = 0.0;
  for (const auto& c : checks) m = std::max(m, c.relative_error);
  return m;
}

}  // namespace mscqg::testing
