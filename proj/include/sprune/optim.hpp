#pragma once

#include <span>
#include <vector>

#include "sprune/tensor.hpp"

namespace sprune {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

/// Adaptive-moment update; state is created on the first step and keyed by
/// parameter position.
class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  void step(std::span<Tensor* const> params, std::span<const Tensor> grads, double lr);
  long steps() const noexcept { return t_; }

 private:
  AdamConfig cfg_;
  std::vector<Tensor> m_, v_;
  long t_ = 0;
};

struct SgdConfig {
  double momentum = 0.9;
  double weight_decay = 5e-4;
};

/// SGD with heavy-ball momentum and L2 weight decay folded into the gradient.
class Sgd {
 public:
  explicit Sgd(SgdConfig cfg = {}) : cfg_(cfg) {}

  void step(std::span<Tensor* const> params, std::span<const Tensor> grads, double lr);

 private:
  SgdConfig cfg_;
  std::vector<Tensor> velocity_;
};

}  // namespace sprune
