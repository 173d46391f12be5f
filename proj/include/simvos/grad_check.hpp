#pragma once

// Central finite-difference verification of the reverse-mode gradients.
// Meant to run on the double instantiation of the stack so the tolerance
// has headroom.

#include <cmath>
#include <functional>

#include "simvos/autograd.hpp"
#include "simvos/optim.hpp"

namespace simvos {

template <typename S>
using LossFn = std::function<Var<S>()>;

// Returns the worst relative error  |g - g_fd| / max(|g|, |g_fd|, 1e-8)
// over every entry of every learnable param.
template <typename S>
double grad_check(const LossFn<S>& loss_fn, ParamRefs<S>& params, double eps = 1e-5) {
  zero_grads(params);
  Var<S> loss = loss_fn();
  if (!loss->value.all_finite()) throw OracleError("grad_check: loss is not finite");
  backward(loss);

  std::vector<Tensor<S>> analytic;
  analytic.reserve(params.size());
  for (Param<S>* p : params) analytic.push_back(p->grad());

  const auto eval = [&]() -> double {
    NoGradGuard guard;
    Var<S> l = loss_fn();
    const double v = static_cast<double>(l->value[0]);
    if (!std::isfinite(v)) throw OracleError("grad_check: perturbed loss is not finite");
    return v;
  };

  double worst = 0.0;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Param<S>* p = params[pi];
    if (!p->learnable) continue;
    Tensor<S>& value = p->value();
    for (std::size_t i = 0; i < value.size(); ++i) {
      const S saved = value[i];
      value[i] = saved + static_cast<S>(eps);
      const double f_plus = eval();
      value[i] = saved - static_cast<S>(eps);
      const double f_minus = eval();
      value[i] = saved;
      const double fd = (f_plus - f_minus) / (2.0 * eps);
      const double g = static_cast<double>(analytic[pi][i]);
      const double rel = std::abs(g - fd) / std::max({std::abs(g), std::abs(fd), 1e-8});
      worst = std::max(worst, rel);
    }
  }
  return worst;
}

}  // namespace simvos
