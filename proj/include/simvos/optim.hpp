#pragma once

// AdamW with decoupled weight decay. Moment state lives on the Param.

#include <cmath>

#include "simvos/autograd.hpp"

namespace simvos {

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

template <typename S>
void adamw_step(ParamRefs<S>& params, const AdamWConfig& cfg) {
  for (Param<S>* p : params) {
    if (!p->learnable) continue;
    Tensor<S>& value = p->value();
    Tensor<S>& grad = p->grad();
    if (p->moment1.empty()) {
      p->moment1 = Tensor<S>(value.dims());
      p->moment2 = Tensor<S>(value.dims());
    }
    p->steps += 1;
    const S b1 = static_cast<S>(cfg.beta1);
    const S b2 = static_cast<S>(cfg.beta2);
    const S corr1 = S(1) - static_cast<S>(std::pow(cfg.beta1, static_cast<double>(p->steps)));
    const S corr2 = S(1) - static_cast<S>(std::pow(cfg.beta2, static_cast<double>(p->steps)));
    const S lr = static_cast<S>(cfg.lr);
    const S wd = static_cast<S>(cfg.weight_decay);
    const S eps = static_cast<S>(cfg.eps);
    for (std::size_t i = 0; i < value.size(); ++i) {
      const S g = grad[i];
      p->moment1[i] = b1 * p->moment1[i] + (S(1) - b1) * g;
      p->moment2[i] = b2 * p->moment2[i] + (S(1) - b2) * g * g;
      const S mhat = p->moment1[i] / corr1;
      const S vhat = p->moment2[i] / corr2;
      value[i] -= lr * (mhat / (std::sqrt(vhat) + eps) + wd * value[i]);
    }
    ensure_finite(value, "adamw_step");
  }
}

template <typename S>
void zero_grads(ParamRefs<S>& params) {
  for (Param<S>* p : params) p->zero_grad();
}

}  // namespace simvos
