#include "sprune/optim.hpp"

#include <cmath>

#include "sprune/error.hpp"

namespace sprune {

void Adam::step(std::span<Tensor* const> params, std::span<const Tensor> grads, double lr) {
  require(params.size() == grads.size(), ErrorKind::contract, "parameter/gradient count mismatch");
  if (m_.empty()) {
    for (const Tensor* p : params) {
      m_.emplace_back(p->shape(), 0.0f);
      v_.emplace_back(p->shape(), 0.0f);
    }
  }
  require(m_.size() == params.size(), ErrorKind::contract, "optimizer parameter set changed");
  ++t_;
  const double b1 = cfg_.beta1, b2 = cfg_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor& p = *params[k];
    const Tensor& g = grads[k];
    require(g.numel() == p.numel(), ErrorKind::dimension, "gradient shape mismatch");
    for (std::size_t i = 0; i < p.numel(); ++i) {
      const double gi = static_cast<double>(g[i]) + cfg_.weight_decay * p[i];
      const double m = b1 * m_[k][i] + (1 - b1) * gi;
      const double v = b2 * v_[k][i] + (1 - b2) * gi * gi;
      m_[k][i] = static_cast<float>(m);
      v_[k][i] = static_cast<float>(v);
      p[i] = static_cast<float>(p[i] - lr * (m / c1) / (std::sqrt(v / c2) + cfg_.eps));
    }
  }
}

void Sgd::step(std::span<Tensor* const> params, std::span<const Tensor> grads, double lr) {
  require(params.size() == grads.size(), ErrorKind::contract, "parameter/gradient count mismatch");
  if (velocity_.empty()) {
    for (const Tensor* p : params) velocity_.emplace_back(p->shape(), 0.0f);
  }
  require(velocity_.size() == params.size(), ErrorKind::contract, "optimizer parameter set changed");
  const auto mu = static_cast<float>(cfg_.momentum);
  const auto wd = static_cast<float>(cfg_.weight_decay);
  const auto step = static_cast<float>(lr);
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor& p = *params[k];
    const Tensor& g = grads[k];
    require(g.numel() == p.numel(), ErrorKind::dimension, "gradient shape mismatch");
    Tensor& vel = velocity_[k];
    for (std::size_t i = 0; i < p.numel(); ++i) {
      vel[i] = mu * vel[i] + g[i] + wd * p[i];
      p[i] -= step * vel[i];
    }
  }
}

}  // namespace sprune
