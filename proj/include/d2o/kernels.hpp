#pragma once

#include <cstdint>

// Elementwise transcendental kernels. Implemented in kernels.cpp, which is
// the only translation unit built with fast-math: the loops there lower to
// the vectorized libm entry points. Inputs are clamped into the finite exp
// range; callers keep strict IEEE semantics.
namespace d2o::kernels {

template <typename S>
void sigmoid(const S* x, S* y, int64_t lo, int64_t hi);
template <typename S>
void silu_fwd(const S* x, S* y, int64_t lo, int64_t hi);
template <typename S>
void silu_bwd(const S* x, const S* g, S* y, int64_t lo, int64_t hi);
template <typename S>
void exp_clamped(const S* x, S* y, int64_t lo, int64_t hi);
template <typename S>
void softplus(const S* x, S* y, int64_t lo, int64_t hi);

}  // namespace d2o::kernels
