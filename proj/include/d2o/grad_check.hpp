#pragma once

#include <functional>

#include "d2o/ops.hpp"

namespace d2o {

// Central-difference check of reverse-mode gradients. Meant for the 64-bit
// scalar type; step 1e-5 balances truncation against round-off there.
// When the point has more coordinates than max_coords, a seeded subset is
// checked. Returns max over checked coordinates of
// |autodiff - central difference| / max(1, |central difference|).
template <typename S>
double grad_check(const std::function<Tensor<S>(const Tensor<S>&)>& fn, const Tensor<S>& point,
                  double h = 1e-5, int64_t max_coords = -1, uint64_t subset_seed = 17) {
  Tensor<S> x = point.detach().set_requires_grad(true);
  Tape<S>& tape = Tape<S>::active();
  size_t mark = tape.size();
  Tensor<S> loss = fn(x);
  if (loss.numel() != 1) throw ShapeError("grad_check: fn must return a scalar");
  Tensor<S> gx = tape.grad(loss, {x})[0];

  std::vector<int64_t> coords;
  int64_t n = x.numel();
  if (max_coords < 0 || n <= max_coords) {
    coords.resize(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) coords[static_cast<size_t>(i)] = i;
  } else {
    RngState rng(subset_seed);
    for (int64_t k = 0; k < max_coords; ++k) coords.push_back(rng.next_below(n));
  }

  double worst = 0.0;
  for (int64_t i : coords) {
    // Probes keep requires_grad so fn may itself differentiate internally.
    Tensor<S> xp = x.detach().set_requires_grad(true);
    Tensor<S> xm = x.detach().set_requires_grad(true);
    xp.data()[i] += static_cast<S>(h);
    xm.data()[i] -= static_cast<S>(h);
    size_t m2 = tape.size();
    double fp = static_cast<double>(fn(xp).item());
    tape.truncate(m2);
    double fm = static_cast<double>(fn(xm).item());
    tape.truncate(m2);
    if (!std::isfinite(fp) || !std::isfinite(fm))
      throw NumericError("grad_check: non-finite function value");
    double fd = (fp - fm) / (2.0 * h);
    double ad = static_cast<double>(gx.data()[i]);
    double err = std::abs(ad - fd) / std::max(1.0, std::abs(fd));
    worst = std::max(worst, err);
  }
  // Drop everything this check appended so callers' tapes stay compact.
  tape.truncate(mark);
  return worst;
}

// Same check for a live parameter of a model: the loss builder reads the
// parameter in place, finite differences perturb it in place. Checks a
// seeded coordinate subset.
template <typename S>
double grad_check_param(const std::function<Tensor<S>()>& loss_fn, Tensor<S> param,
                        int64_t max_coords, uint64_t subset_seed, double h = 1e-5) {
  Tape<S>& tape = Tape<S>::active();
  size_t mark = tape.size();
  Tensor<S> loss = loss_fn();
  Tensor<S> gp = tape.grad(loss, {param})[0];
  tape.truncate(mark);

  RngState rng(subset_seed);
  double worst = 0.0;
  for (int64_t k = 0; k < max_coords; ++k) {
    int64_t i = max_coords >= param.numel() ? k : rng.next_below(param.numel());
    if (i >= param.numel()) break;
    S saved = param.data()[i];
    size_t m2 = tape.size();
    param.data()[i] = saved + static_cast<S>(h);
    double fp = static_cast<double>(loss_fn().item());
    tape.truncate(m2);
    param.data()[i] = saved - static_cast<S>(h);
    double fm = static_cast<double>(loss_fn().item());
    tape.truncate(m2);
    param.data()[i] = saved;
    if (!std::isfinite(fp) || !std::isfinite(fm))
      throw NumericError("grad_check_param: non-finite function value");
    double fd = (fp - fm) / (2.0 * h);
    double ad = static_cast<double>(gp.data()[i]);
    worst = std::max(worst, std::abs(ad - fd) / std::max(1.0, std::abs(fd)));
  }
  return worst;
}

}  // namespace d2o
