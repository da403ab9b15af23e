#pragma once

#include "mscqg/autograd.hpp"

#include <vector>

namespace mscqg {

struct AdamWConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-6;
  double weight_decay = 0.01;
};

/// Adam with decoupled weight decay, BERT variant: moments are used without
/// bias correction and decay is applied to the weights directly.
class AdamW {
 public:
  AdamW(std::vector<Parameter*> params, AdamWConfig cfg);

  /// `grads[i]` must match `params[i]` in shape.
  void step(const std::vector<Matrix>& grads);

  [[nodiscard]] const AdamWConfig& config() const { return cfg_; }
  [[nodiscard]] long steps_taken() const { return t_; }

 private:
  std::vector<Parameter*> params_;
  std::vector<Matrix> m_, v_;
  AdamWConfig cfg_;
  long t_ = 0;
};

}  // namespace mscqg
