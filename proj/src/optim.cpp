#include "mscqg/optim.hpp"

#include <stdexcept>

namespace mscqg {

AdamW::AdamW(std::vector<Parameter*> params, AdamWConfig cfg) : params_(std::move(params)), cfg_(cfg) {
  for (const Parameter* p : params_) {
    m_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
    v_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
  }
}

void AdamW::step(const std::vector<Matrix>& grads) {
  if (grads.size() != params_.size()) throw std::invalid_argument("AdamW: gradient count mismatch");
  ++t_;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Matrix& w = params_[i]->value;
    const Matrix& g = grads[i];
    if (g.rows() != w.rows() || g.cols() != w.cols()) throw std::invalid_argument("AdamW: gradient shape mismatch");
    m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * g;
    v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * g.cwiseAbs2();
    Matrix update = m_[i].array() / (v_[i].array().sqrt() + cfg_.epsilon);
    // Row vectors are biases and layer-norm gains; they are not decayed.
    if (cfg_.weight_decay > 0.0 && w.rows() > 1) update += cfg_.weight_decay * w;
    w -= cfg_.learning_rate * update;
  }
}

}  // namespace mscqg
