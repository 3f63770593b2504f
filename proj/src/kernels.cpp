#include "d2o/kernels.hpp"

#include <algorithm>
#include <cmath>

namespace d2o::kernels {

template <typename S>
void sigmoid(const S* x, S* y, int64_t lo, int64_t hi) {
  for (int64_t i = lo; i < hi; ++i) {
    S xc = std::min(S(87), std::max(S(-87), x[i]));
    y[i] = S(1) / (S(1) + std::exp(-xc));
  }
}

template <typename S>
void silu_fwd(const S* x, S* y, int64_t lo, int64_t hi) {
  for (int64_t i = lo; i < hi; ++i) {
    S xc = std::min(S(87), std::max(S(-87), x[i]));
    y[i] = x[i] / (S(1) + std::exp(-xc));
  }
}

template <typename S>
void silu_bwd(const S* x, const S* g, S* y, int64_t lo, int64_t hi) {
  for (int64_t i = lo; i < hi; ++i) {
    S xc = std::min(S(87), std::max(S(-87), x[i]));
    S s = S(1) / (S(1) + std::exp(-xc));
    y[i] = g[i] * (s + x[i] * s * (S(1) - s));
  }
}

template <typename S>
void exp_clamped(const S* x, S* y, int64_t lo, int64_t hi) {
  for (int64_t i = lo; i < hi; ++i) y[i] = std::exp(std::min(S(87), std::max(S(-87), x[i])));
}

// softplus(x) = max(x,0) + log(1 + exp(-|x|))
template <typename S>
void softplus(const S* x, S* y, int64_t lo, int64_t hi) {
  for (int64_t i = lo; i < hi; ++i) {
    S ax = x[i] < S(0) ? -x[i] : x[i];
    y[i] = std::max(x[i], S(0)) + std::log(S(1) + std::exp(-ax));
  }
}

template void sigmoid<float>(const float*, float*, int64_t, int64_t);
template void sigmoid<double>(const double*, double*, int64_t, int64_t);
template void silu_fwd<float>(const float*, float*, int64_t, int64_t);
template void silu_fwd<double>(const double*, double*, int64_t, int64_t);
template void silu_bwd<float>(const float*, const float*, float*, int64_t, int64_t);
template void silu_bwd<double>(const double*, const double*, double*, int64_t, int64_t);
template void exp_clamped<float>(const float*, float*, int64_t, int64_t);
template void exp_clamped<double>(const double*, double*, int64_t, int64_t);
template void softplus<float>(const float*, float*, int64_t, int64_t);
template void softplus<double>(const double*, double*, int64_t, int64_t);

}  // namespace d2o::kernels
