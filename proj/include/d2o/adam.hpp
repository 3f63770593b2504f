#pragma once

#include <cmath>

#include "d2o/tensor.hpp"

namespace d2o {

// Bias-corrected Adam, no weight decay, no gradient clipping.
template <typename S>
struct AdamState {
  double lr = 1e-4;
  double beta1 = 0.0;
  double beta2 = 0.99;
  double eps = 1e-8;
  int64_t step = 0;
  std::vector<std::vector<S>> m, v;  // one pair per parameter, same shapes

  AdamState() = default;
  AdamState(double lr_, double b1, double b2, double eps_ = 1e-8)
      : lr(lr_), beta1(b1), beta2(b2), eps(eps_) {}

  void ensure(const std::vector<Tensor<S>>& params) {
    if (!m.empty()) return;
    m.resize(params.size());
    v.resize(params.size());
    for (size_t i = 0; i < params.size(); ++i) {
      m[i].assign(static_cast<size_t>(params[i].numel()), S(0));
      v[i].assign(static_cast<size_t>(params[i].numel()), S(0));
    }
  }
};

// Applies one update in place using each parameter's accumulated .grad.
// Parameters without a populated gradient buffer are treated as grad 0.
template <typename S>
void adam_step(std::vector<Tensor<S>>& params, AdamState<S>& state) {
  state.ensure(params);
  if (state.m.size() != params.size()) throw ShapeError("adam_step: parameter count changed");
  ++state.step;
  const double b1 = state.beta1, b2 = state.beta2;
  const double corr1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double corr2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  for (size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    if (static_cast<int64_t>(state.m[i].size()) != p.numel())
      throw ShapeError("adam_step: moment/parameter shape mismatch");
    if (!p.has_grad()) continue;
    S* w = p.data();
    const S* g = p.grad_buf().data();
    S* m = state.m[i].data();
    S* v = state.v[i].data();
    int64_t n = p.numel();
    for (int64_t j = 0; j < n; ++j) {
      double gj = static_cast<double>(g[j]);
      if (!std::isfinite(gj)) throw NumericError("adam_step: non-finite gradient");
      double mj = b1 * static_cast<double>(m[j]) + (1.0 - b1) * gj;
      double vj = b2 * static_cast<double>(v[j]) + (1.0 - b2) * gj * gj;
      m[j] = static_cast<S>(mj);
      v[j] = static_cast<S>(vj);
      double mhat = mj / corr1;
      double vhat = vj / corr2;
      w[j] = static_cast<S>(static_cast<double>(w[j]) - state.lr * mhat / (std::sqrt(vhat) + state.eps));
    }
  }
}

}  // namespace d2o
