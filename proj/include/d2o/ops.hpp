#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cstring>

#include "d2o/kernels.hpp"
#include "d2o/parallel.hpp"
#include "d2o/tensor.hpp"

namespace d2o {

// Debug switch: when on, every op validates output finiteness. Training
// loops always validate at the loss, so this stays off in hot paths.
inline bool& debug_finite_checks() {
  static bool on = false;
  return on;
}

namespace detail {

template <typename S>
using MatRM = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using MapRM = Eigen::Map<MatRM<S>>;
template <typename S>
using CMapRM = Eigen::Map<const MatRM<S>>;

template <typename S>
inline bool want_grad(std::initializer_list<const Tensor<S>*> ps) {
  if (!grad_enabled()) return false;
  for (auto* t : ps)
    if (t->defined() && t->p->requires_grad) return true;
  return false;
}

template <typename S>
inline void finite_check(const Tensor<S>& t, const char* op) {
  if (debug_finite_checks() && !t.all_finite())
    throw NumericError(std::string("non-finite output of ") + op);
}

}  // namespace detail

template <typename S>
Tensor<S> zeros_like(const Tensor<S>& a) {
  return Tensor<S>::zeros(a.shape());
}
template <typename S>
Tensor<S> ones_like(const Tensor<S>& a) {
  return Tensor<S>::full(a.shape(), S(1));
}

// Forward declarations for backwards written in terms of other primitives.
template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b);
template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b);
template <typename S>
Tensor<S> mul_scalar(const Tensor<S>& a, double c);
template <typename S>
Tensor<S> sigmoid(const Tensor<S>& a);
template <typename S>
Tensor<S> recip(const Tensor<S>& a);
template <typename S>
Tensor<S> transpose2(const Tensor<S>& a);
template <typename S>
Tensor<S> btrans(const Tensor<S>& a);
template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b);
template <typename S>
Tensor<S> bmm(const Tensor<S>& a, const Tensor<S>& b);
template <typename S>
Tensor<S> sum_all(const Tensor<S>& a);
template <typename S>
Tensor<S> full_bcast(const Tensor<S>& s, Shape shape);
template <typename S>
Tensor<S> channel_sum(const Tensor<S>& a);
template <typename S>
Tensor<S> bcast_channel(const Tensor<S>& v, int64_t B, int64_t H, int64_t W);
template <typename S>
Tensor<S> mul_channel(const Tensor<S>& a, const Tensor<S>& v);
template <typename S>
Tensor<S> channel_dot(const Tensor<S>& a, const Tensor<S>& b);
template <typename S>
Tensor<S> spatial_sum(const Tensor<S>& a);
template <typename S>
Tensor<S> spatial_bcast(const Tensor<S>& e, int64_t H, int64_t W);
template <typename S>
Tensor<S> colsum(const Tensor<S>& a);
template <typename S>
Tensor<S> bcast_row(const Tensor<S>& v, int64_t B);
template <typename S>
Tensor<S> mul_per_sample(const Tensor<S>& a, const Tensor<S>& v);
template <typename S>
Tensor<S> sample_dot(const Tensor<S>& a, const Tensor<S>& b);
template <typename S>
Tensor<S> group_mean_bcast(const Tensor<S>& a, int64_t groups);
template <typename S>
Tensor<S> rowsum_bcast(const Tensor<S>& a);
template <typename S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& w, int stride, int pad);
template <typename S>
Tensor<S> conv2d_wgrad(const Tensor<S>& x, const Tensor<S>& g, int kh, int kw, int stride,
                       int pad, const AVec<S>* cached_cols = nullptr);
template <typename S>
Tensor<S> rot180_swap(const Tensor<S>& w);
template <typename S>
Tensor<S> zero_stuff(const Tensor<S>& x, int stride, int64_t Hs, int64_t Ws);
template <typename S>
Tensor<S> subsample_st(const Tensor<S>& x, int stride, int64_t Ho, int64_t Wo);
template <typename S>
Tensor<S> avgpool2(const Tensor<S>& x);
template <typename S>
Tensor<S> upsample2(const Tensor<S>& x);
template <typename S>
Tensor<S> slice_ch(const Tensor<S>& x, int64_t c0, int64_t c1);
template <typename S>
Tensor<S> pad_ch(const Tensor<S>& x, int64_t channels, int64_t at);
template <typename S>
Tensor<S> embed_rows(const Tensor<S>& table, const std::vector<int64_t>& ids);
template <typename S>
Tensor<S> embed_scatter(const Tensor<S>& g, const std::vector<int64_t>& ids, int64_t rows);

// ---------------------------------------------------------------------------
// Elementwise

template <typename S, typename F>
Tensor<S> ew_binary(const char* name, const Tensor<S>& a, const Tensor<S>& b, F f) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(name) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  Tensor<S> out = Tensor<S>::uninit(a.shape());
  const S* pa = a.data();
  const S* pb = b.data();
  S* po = out.data();
  parallel_for(a.numel(), [&](int64_t lo, int64_t hi) {
    for (int64_t i = lo; i < hi; ++i) po[i] = f(pa[i], pb[i]);
  });
  detail::finite_check(out, name);
  return out;
}

template <typename S, typename F>
Tensor<S> ew_unary(const char* name, const Tensor<S>& a, F f) {
  Tensor<S> out = Tensor<S>::uninit(a.shape());
  const S* pa = a.data();
  S* po = out.data();
  parallel_for(a.numel(), [&](int64_t lo, int64_t hi) {
    for (int64_t i = lo; i < hi; ++i) po[i] = f(pa[i]);
  });
  detail::finite_check(out, name);
  return out;
}

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  Tensor<S> out = ew_binary<S>("add", a, b, [](S x, S y) { return x + y; });
  if (detail::want_grad<S>({&a, &b}))
    Tape<S>::active().record(out, {a, b},
                             [](const Tensor<S>& g, const std::vector<char>&) { return std::vector<Tensor<S>>{g, g}; });
  return out;
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  Tensor<S> out = ew_binary<S>("sub", a, b, [](S x, S y) { return x - y; });
  if (detail::want_grad<S>({&a, &b}))
    Tape<S>::active().record(out, {a, b}, [](const Tensor<S>& g, const std::vector<char>&) {
      return std::vector<Tensor<S>>{g, mul_scalar(g, -1.0)};
    });
  return out;
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  Tensor<S> out = ew_binary<S>("mul", a, b, [](S x, S y) { return x * y; });
  if (detail::want_grad<S>({&a, &b}))
    Tape<S>::active().record(out, {a, b},
                             [a, b](const Tensor<S>& g, const std::vector<char>& need) {
                               std::vector<Tensor<S>> gs(2);
                               if (need[0]) gs[0] = mul(g, b);
                               if (need[1]) gs[1] = mul(g, a);
                               return gs;
                             });
  return out;
}

template <typename S>
Tensor<S> add_scalar(const Tensor<S>& a, double c) {
  Tensor<S> out = ew_unary<S>("add_scalar", a, [c](S x) { return x + static_cast<S>(c); });
  if (detail::want_grad<S>({&a}))
    Tape<S>::active().record(out, {a},
                             [](const Tensor<S>& g, const std::vector<char>&) { return std::vector<Tensor<S>>{g}; });
  return out;
}

template <typename S>
Tensor<S> mul_scalar(const Tensor<S>& a, double c) {
  Tensor<S> out = ew_unary<S>("mul_scalar", a, [c](S x) { return x * static_cast<S>(c); });
  if (detail::want_grad<S>({&a}))
    Tape<S>::active().record(out, {a}, [c](const Tensor<S>& g, const std::vector<char>&) {
      return std::vector<Tensor<S>>{mul_scalar(g, c)};
    });
  return out;
}

template <typename S>
Tensor<S> sigmoid(const Tensor<S>& a) {
  Tensor<S> out = Tensor<S>::uninit(a.shape());
  parallel_for(a.numel(), [&](int64_t lo, int64_t hi) {
    kernels::sigmoid(a.data(), out.data(), lo, hi);
  });
  detail::finite_check(out, "sigmoid");
  if (detail::want_grad<S>({&a}))
    Tape<S>::active().record(out, {a}, [out](const Tensor<S>& g, const std::vector<char>&) {
      Tensor<S> one_minus = add_scalar(mul_scalar(out, -1.0), 1.0);
      return std::vector<Tensor<S>>{mul(g, mul(out, one_minus))};
    });
  return out;
}

template <typename S>
Tensor<S> exp(const Tensor<S>& a) {
  Tensor<S> out = Tensor<S>::uninit(a.shape());
  parallel_for(a.numel(), [&](int64_t lo, int64_t hi) {
    kernels::exp_clamped(a.data(), out.data(), lo, hi);
  });
  detail::finite_check(out, "exp");
  if (detail::want_grad<S>({&a}))
    Tape<S>::active().record(out, {a}, [out](const Tensor<S>& g, const std::vector<char>&) {
      return std::vector<Tensor<S>>{mul(g, out)};
    });
  return out;
}

template <typename S>
Tensor<S> log(const Tensor<S>& a) {
  Tensor<S> out = ew_unary<S>("log", a, [](S x) { return std::log(x); });
  if (detail::want_grad<S>({&a}))
    Tape<S>::active().record(out, {a}, [a](const Tensor<S>& g, const std::vector<char>&) {
      return std::vector<Tensor<S>>{mul(g, recip(a))};
    });
  return out;
}

template <typename S>
Tensor<S> recip(const Tensor<S>& a) {
  Tensor<S> out = ew_unary<S>("recip", a, [](S x) { return S(1) / x; });
  if (detail::want_grad<S>({&a}))
    Tape<S>::active().record(out, {a}, [out](const Tensor<S>& g, const std::vector<char>&) {
      return std::vector<Tensor<S>>{mul_scalar(mul(g, mul(out, out)), -1.0)};
    });
  return out;
}

template <typename S>
Tensor<S> rsqrt(const Tensor<S>& a) {
  Tensor<S> out = ew_unary<S>("rsqrt", a, [](S x) { return S(1) / std::sqrt(x); });
  if (detail::want_grad<S>({&a}))
    Tape<S>::active().record(out, {a}, [out](const Tensor<S>& g, const std::vector<char>&) {
      Tensor<S> cube = mul(out, mul(out, out));
      return std::vector<Tensor<S>>{mul_scalar(mul(g, cube), -0.5)};
    });
  return out;
}

template <typename S>
Tensor<S> softplus(const Tensor<S>& a) {
  Tensor<S> out = Tensor<S>::uninit(a.shape());
  parallel_for(a.numel(), [&](int64_t lo, int64_t hi) {
    kernels::softplus(a.data(), out.data(), lo, hi);
  });
  detail::finite_check(out, "softplus");
  if (detail::want_grad<S>({&a}))
    Tape<S>::active().record(out, {a}, [a](const Tensor<S>& g, const std::vector<char>&) {
      return std::vector<Tensor<S>>{mul(g, sigmoid(a))};
    });
  return out;
}

// Negative-side mask is captured as a constant, so the second derivative
// treats the kink pattern as fixed.
template <typename S>
Tensor<S> leaky_relu(const Tensor<S>& a, double alpha = 0.2) {
  Tensor<S> out = ew_unary<S>("leaky_relu", a, [alpha](S x) {
    return x > S(0) ? x : static_cast<S>(alpha) * x;
  });
  if (detail::want_grad<S>({&a})) {
    Tensor<S> mask = Tensor<S>::uninit(a.shape());
    const S* pa = a.data();
    S* pm = mask.data();
    for (int64_t i = 0; i < a.numel(); ++i) pm[i] = pa[i] > S(0) ? S(1) : static_cast<S>(alpha);
    Tape<S>::active().record(out, {a}, [mask](const Tensor<S>& g, const std::vector<char>&) {
      return std::vector<Tensor<S>>{mul(g, mask)};
    });
  }
  return out;
}

// Composite form, differentiable to any order.
template <typename S>
Tensor<S> silu_ref(const Tensor<S>& a) {
  return mul(a, sigmoid(a));
}

// Fused x * sigmoid(x) with a hand-written first-order backward.
template <typename S>
Tensor<S> silu(const Tensor<S>& a) {
  Tensor<S> out = Tensor<S>::uninit(a.shape());
  parallel_for(a.numel(), [&](int64_t lo, int64_t hi) {
    kernels::silu_fwd(a.data(), out.data(), lo, hi);
  });
  detail::finite_check(out, "silu");
  if (detail::want_grad<S>({&a}))
    Tape<S>::active().record(out, {a}, [a](const Tensor<S>& g, const std::vector<char>&) {
      if (grad_enabled()) throw TapeError("silu: second derivatives need silu_ref");
      Tensor<S> gx = Tensor<S>::uninit(a.shape());
      parallel_for(a.numel(), [&](int64_t lo, int64_t hi) {
        kernels::silu_bwd(a.data(), g.data(), gx.data(), lo, hi);
      });
      return std::vector<Tensor<S>>{gx};
    });
  return out;
}

template <typename S>
Tensor<S> square(const Tensor<S>& a) {
  return mul(a, a);
}

// ---------------------------------------------------------------------------
// Shape ops

template <typename S>
Tensor<S> reshape(const Tensor<S>& a, Shape shape) {
  if (numel_of(shape) != a.numel())
    throw ShapeError("reshape: element count mismatch " + shape_str(a.shape()) + " -> " +
                     shape_str(shape));
  Tensor<S> out = Tensor<S>::uninit(shape);
  std::copy(a.values().begin(), a.values().end(), out.values().begin());
  if (detail::want_grad<S>({&a})) {
    Shape orig = a.shape();
    Tape<S>::active().record(out, {a}, [orig](const Tensor<S>& g, const std::vector<char>&) {
      return std::vector<Tensor<S>>{reshape(g, orig)};
    });
  }
  return out;
}

// Value passes through, gradient does not.
template <typename S>
Tensor<S> stop_grad(const Tensor<S>& a) {
  return a.detach();
}

template <typename S>
Tensor<S> concat_ch(const std::vector<Tensor<S>>& xs) {
  require(!xs.empty(), "concat_ch: empty input");
  int64_t B = xs[0].dim(0), H = xs[0].dim(2), W = xs[0].dim(3);
  int64_t C = 0;
  for (const auto& x : xs) {
    require(x.shape().size() == 4 && x.dim(0) == B && x.dim(2) == H && x.dim(3) == W,
            "concat_ch: incompatible shapes");
    C += x.dim(1);
  }
  Tensor<S> out = Tensor<S>::uninit({B, C, H, W});
  int64_t hw = H * W;
  int64_t coff = 0;
  for (const auto& x : xs) {
    int64_t cx = x.dim(1);
    for (int64_t b = 0; b < B; ++b)
      std::memcpy(out.data() + (b * C + coff) * hw, x.data() + b * cx * hw,
                  sizeof(S) * static_cast<size_t>(cx * hw));
    coff += cx;
  }
  bool rg = false;
  for (const auto& x : xs) rg = rg || x.p->requires_grad;
  if (grad_enabled() && rg) {
    std::vector<int64_t> widths;
    for (const auto& x : xs) widths.push_back(x.dim(1));
    Tape<S>::active().record(out, xs, [widths](const Tensor<S>& g, const std::vector<char>&) {
      std::vector<Tensor<S>> gs;
      int64_t at = 0;
      for (int64_t w : widths) {
        gs.push_back(slice_ch(g, at, at + w));
        at += w;
      }
      return gs;
    });
  }
  return out;
}

template <typename S>
Tensor<S> slice_ch(const Tensor<S>& x, int64_t c0, int64_t c1) {
  require(x.shape().size() == 4, "slice_ch: need BCHW");
  int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  require(0 <= c0 && c0 < c1 && c1 <= C, "slice_ch: bad channel range");
  int64_t hw = H * W, Cw = c1 - c0;
  Tensor<S> out = Tensor<S>::uninit({B, Cw, H, W});
  for (int64_t b = 0; b < B; ++b)
    std::memcpy(out.data() + b * Cw * hw, x.data() + (b * C + c0) * hw,
                sizeof(S) * static_cast<size_t>(Cw * hw));
  if (detail::want_grad<S>({&x}))
    Tape<S>::active().record(out, {x}, [C, c0](const Tensor<S>& g, const std::vector<char>&) {
      return std::vector<Tensor<S>>{pad_ch(g, C, c0)};
    });
  return out;
}

template <typename S>
Tensor<S> pad_ch(const Tensor<S>& x, int64_t channels, int64_t at) {
  require(x.shape().size() == 4, "pad_ch: need BCHW");
  int64_t B = x.dim(0), Cx = x.dim(1), H = x.dim(2), W = x.dim(3);
  require(at >= 0 && at + Cx <= channels, "pad_ch: range outside target");
  int64_t hw = H * W;
  Tensor<S> out = Tensor<S>::zeros({B, channels, H, W});
  for (int64_t b = 0; b < B; ++b)
    std::memcpy(out.data() + (b * channels + at) * hw, x.data() + b * Cx * hw,
                sizeof(S) * static_cast<size_t>(Cx * hw));
  if (detail::want_grad<S>({&x}))
    Tape<S>::active().record(out, {x}, [at, Cx](const Tensor<S>& g, const std::vector<char>&) {
      return std::vector<Tensor<S>>{slice_ch(g, at, at + Cx)};
    });
  return out;
}

template <typename S>
Tensor<S> pad_batch(const Tensor<S>& x, int64_t batch, int64_t at);

// Contiguous sub-range along the batch axis.
template <typename S>
Tensor<S> slice_batch(const Tensor<S>& x, int64_t b0, int64_t b1 = -1) {
  if (b1 < 0) b1 = b0 + 1;
  int64_t B = x.dim(0);
  require(0 <= b0 && b0 < b1 && b1 <= B, "slice_batch: bad range");
  int64_t stride = x.numel() / B;
  Shape shape = x.shape();
  shape[0] = b1 - b0;
  Tensor<S> out = Tensor<S>::uninit(shape);
  std::memcpy(out.data(), x.data() + b0 * stride,
              sizeof(S) * static_cast<size_t>((b1 - b0) * stride));
  if (detail::want_grad<S>({&x}))
    Tape<S>::active().record(out, {x}, [B, b0](const Tensor<S>& g, const std::vector<char>&) {
      return std::vector<Tensor<S>>{pad_batch(g, B, b0)};
    });
  return out;
}

template <typename S>
Tensor<S> pad_batch(const Tensor<S>& x, int64_t batch, int64_t at) {
  int64_t Bx = x.dim(0);
  require(at >= 0 && at + Bx <= batch, "pad_batch: range outside target");
  Shape shape = x.shape();
  shape[0] = batch;
  int64_t stride = x.numel() / Bx;
  Tensor<S> out = Tensor<S>::zeros(shape);
  std::memcpy(out.data() + at * stride, x.data(), sizeof(S) * static_cast<size_t>(Bx * stride));
  if (detail::want_grad<S>({&x}))
    Tape<S>::active().record(out, {x}, [at, Bx](const Tensor<S>& g, const std::vector<char>&) {
      return std::vector<Tensor<S>>{slice_batch(g, at, at + Bx)};
    });
  return out;
}

template <typename S>
Tensor<S> concat_batch(const std::vector<Tensor<S>>& xs) {
  require(!xs.empty(), "concat_batch: empty input");
  Shape shape = xs[0].shape();
  int64_t stride = xs[0].numel() / xs[0].dim(0);
  int64_t B = 0;
  for (const auto& x : xs) {
    Shape s2 = x.shape();
    s2[0] = shape[0];
    require(s2 == shape, "concat_batch: incompatible shapes");
    B += x.dim(0);
  }
  shape[0] = B;
  Tensor<S> out = Tensor<S>::uninit(shape);
  int64_t at = 0;
  for (const auto& x : xs) {
    std::memcpy(out.data() + at * stride, x.data(),
                sizeof(S) * static_cast<size_t>(x.numel()));
    at += x.dim(0);
  }
  bool rg = false;
  for (const auto& x : xs) rg = rg || x.p->requires_grad;
  if (grad_enabled() && rg) {
    std::vector<int64_t> counts;
    for (const auto& x : xs) counts.push_back(x.dim(0));
    Tape<S>::active().record(out, xs, [counts](const Tensor<S>& g, const std::vector<char>&) {
      std::vector<Tensor<S>> gs;
      int64_t b0 = 0;
      for (int64_t c : counts) {
        gs.push_back(slice_batch(g, b0, b0 + c));
        b0 += c;
      }
      return gs;
    });
  }
  return out;
}

template <typename S>
Tensor<S> transpose2(const Tensor<S>& a) {
  require(a.shape().size() == 2, "transpose2: need 2-d");
  int64_t M = a.dim(0), N = a.dim(1);
  Tensor<S> out = Tensor<S>::uninit({N, M});
  detail::CMapRM<S> A(a.data(), M, N);
  detail::MapRM<S> O(out.data(), N, M);
  O = A.transpose();
  if (detail::want_grad<S>({&a}))
    Tape<S>::active().record(out, {a}, [](const Tensor<S>& g, const std::vector<char>&) {
      return std::vector<Tensor<S>>{transpose2(g)};
    });
  return out;
}

template <typename S>
Tensor<S> btrans(const Tensor<S>& a) {
  require(a.shape().size() == 3, "btrans: need 3-d");
  int64_t B = a.dim(0), M = a.dim(1), N = a.dim(2);
  Tensor<S> out = Tensor<S>::uninit({B, N, M});
  for (int64_t b = 0; b < B; ++b) {
    detail::CMapRM<S> A(a.data() + b * M * N, M, N);
    detail::MapRM<S> O(out.data() + b * M * N, N, M);
    O = A.transpose();
  }
  if (detail::want_grad<S>({&a}))
    Tape<S>::active().record(out, {a}, [](const Tensor<S>& g, const std::vector<char>&) {
      return std::vector<Tensor<S>>{btrans(g)};
    });
  return out;
}

template <typename S>
Tensor<S> flip_w(const Tensor<S>& x) {
  require(x.shape().size() == 4, "flip_w: need BCHW");
  int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  Tensor<S> out = Tensor<S>::uninit(x.shape());
  const S* px = x.data();
  S* po = out.data();
  parallel_for(B * C * H, [&](int64_t lo, int64_t hi) {
    for (int64_t r = lo; r < hi; ++r)
      for (int64_t c = 0; c < W; ++c) po[r * W + c] = px[r * W + (W - 1 - c)];
  });
  if (detail::want_grad<S>({&x}))
    Tape<S>::active().record(out, {x}, [](const Tensor<S>& g, const std::vector<char>&) {
      return std::vector<Tensor<S>>{flip_w(g)};
    });
  return out;
}

// Integer translation with zero fill; adjoint is the opposite shift.
template <typename S>
Tensor<S> shift2d(const Tensor<S>& x, int dy, int dx) {
  require(x.shape().size() == 4, "shift2d: need BCHW");
  int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  const S* px = x.data();
  S* po = out.data();
  parallel_for(B * C, [&](int64_t lo, int64_t hi) {
    for (int64_t bc = lo; bc < hi; ++bc)
      for (int64_t y = 0; y < H; ++y) {
        int64_t sy = y - dy;
        if (sy < 0 || sy >= H) continue;
        for (int64_t c = 0; c < W; ++c) {
          int64_t sx = c - dx;
          if (sx < 0 || sx >= W) continue;
          po[(bc * H + y) * W + c] = px[(bc * H + sy) * W + sx];
        }
      }
  });
  if (detail::want_grad<S>({&x}))
    Tape<S>::active().record(out, {x}, [dy, dx](const Tensor<S>& g, const std::vector<char>&) {
      return std::vector<Tensor<S>>{shift2d(g, -dy, -dx)};
    });
  return out;
}

// ---------------------------------------------------------------------------
// Reductions and broadcasts (each is the adjoint of its partner)

template <typename S>
Tensor<S> sum_all(const Tensor<S>& a) {
  double acc = 0.0;
  const S* pa = a.data();
  for (int64_t i = 0; i < a.numel(); ++i) acc += static_cast<double>(pa[i]);
  Tensor<S> out = Tensor<S>::scalar(static_cast<S>(acc));
  detail::finite_check(out, "sum_all");
  if (detail::want_grad<S>({&a})) {
    Shape shape = a.shape();
    Tape<S>::active().record(out, {a}, [shape](const Tensor<S>& g, const std::vector<char>&) {
      return std::vector<Tensor<S>>{full_bcast(g, shape)};
    });
  }
  return out;
}

template <typename S>
Tensor<S> mean_all(const Tensor<S>& a) {
  return mul_scalar(sum_all(a), 1.0 / static_cast<double>(a.numel()));
}

template <typename S>
Tensor<S> full_bcast(const Tensor<S>& s, Shape shape) {
  require(s.numel() == 1, "full_bcast: need scalar");
  Tensor<S> out = Tensor<S>::full(shape, s.item());
  if (detail::want_grad<S>({&s}))
    Tape<S>::active().record(out, {s}, [](const Tensor<S>& g, const std::vector<char>&) {
      return std::vector<Tensor<S>>{sum_all(g)};
    });
  return out;
}

template <typename S>
Tensor<S> channel_sum(const Tensor<S>& a) {
  require(a.shape().size() == 4, "channel_sum: need BCHW");
  int64_t B = a.dim(0), C = a.dim(1), hw = a.dim(2) * a.dim(3);
  Tensor<S> out = Tensor<S>::uninit({C});
  const S* pa = a.data();
  S* po = out.data();
  ThreadPool::instance().run_chunked(C, [&](int, int64_t lo, int64_t hi) {
    for (int64_t c = lo; c < hi; ++c) {
      double acc = 0.0;
      for (int64_t b = 0; b < B; ++b) {
        const S* row = pa + (b * C + c) * hw;
        for (int64_t i = 0; i < hw; ++i) acc += static_cast<double>(row[i]);
      }
      po[c] = static_cast<S>(acc);
    }
  });
  if (detail::want_grad<S>({&a})) {
    int64_t H = a.dim(2), W = a.dim(3);
    Tape<S>::active().record(out, {a}, [B, H, W](const Tensor<S>& g, const std::vector<char>&) {
      return std::vector<Tensor<S>>{bcast_channel(g, B, H, W)};
    });
  }
  return out;
}

template <typename S>
Tensor<S> bcast_channel(const Tensor<S>& v, int64_t B, int64_t H, int64_t W) {
  require(v.shape().size() == 1, "bcast_channel: need 1-d");
  int64_t C = v.dim(0), hw = H * W;
  Tensor<S> out = Tensor<S>::uninit({B, C, H, W});
  S* po = out.data();
  const S* pv = v.data();
  parallel_for(B * C, [&](int64_t lo, int64_t hi) {
    for (int64_t bc = lo; bc < hi; ++bc) {
      S val = pv[bc % C];
      S* row = po + bc * hw;
      for (int64_t i = 0; i < hw; ++i) row[i] = val;
    }
  });
  if (detail::want_grad<S>({&v}))
    Tape<S>::active().record(out, {v}, [](const Tensor<S>& g, const std::vector<char>&) {
      return std::vector<Tensor<S>>{channel_sum(g)};
    });
  return out;
}

template <typename S>
Tensor<S> mul_channel(const Tensor<S>& a, const Tensor<S>& v) {
  require(a.shape().size() == 4 && v.shape().size() == 1 && v.dim(0) == a.dim(1),
          "mul_channel: shapes " + shape_str(a.shape()) + " x " + shape_str(v.shape()));
  int64_t B = a.dim(0), C = a.dim(1), hw = a.dim(2) * a.dim(3);
  Tensor<S> out = Tensor<S>::uninit(a.shape());
  const S* pa = a.data();
  const S* pv = v.data();
  S* po = out.data();
  parallel_for(B * C, [&](int64_t lo, int64_t hi) {
    for (int64_t bc = lo; bc < hi; ++bc) {
      S val = pv[bc % C];
      const S* ra = pa + bc * hw;
      S* ro = po + bc * hw;
      for (int64_t i = 0; i < hw; ++i) ro[i] = ra[i] * val;
    }
  });
  detail::finite_check(out, "mul_channel");
  if (detail::want_grad<S>({&a, &v}))
    Tape<S>::active().record(out, {a, v},
                             [a, v](const Tensor<S>& g, const std::vector<char>& need) {
                               std::vector<Tensor<S>> gs(2);
                               if (need[0]) gs[0] = mul_channel(g, v);
                               if (need[1]) gs[1] = channel_dot(g, a);
                               return gs;
                             });
  return out;
}

template <typename S>
Tensor<S> channel_dot(const Tensor<S>& a, const Tensor<S>& b) {
  require(a.shape() == b.shape() && a.shape().size() == 4, "channel_dot: need matching BCHW");
  int64_t B = a.dim(0), C = a.dim(1), hw = a.dim(2) * a.dim(3);
  Tensor<S> out = Tensor<S>::zeros({C});
  const S* pa = a.data();
  const S* pb = b.data();
  for (int64_t c = 0; c < C; ++c) {
    double acc = 0.0;
    for (int64_t b0 = 0; b0 < B; ++b0) {
      const S* ra = pa + (b0 * C + c) * hw;
      const S* rb = pb + (b0 * C + c) * hw;
      for (int64_t i = 0; i < hw; ++i) acc += static_cast<double>(ra[i]) * rb[i];
    }
    out.data()[c] = static_cast<S>(acc);
  }
  if (detail::want_grad<S>({&a, &b}))
    Tape<S>::active().record(out, {a, b}, [a, b](const Tensor<S>& g, const std::vector<char>&) {
      int64_t B2 = a.dim(0), H2 = a.dim(2), W2 = a.dim(3);
      Tensor<S> gb = bcast_channel(g, B2, H2, W2);
      return std::vector<Tensor<S>>{mul(gb, b), mul(gb, a)};
    });
  return out;
}

template <typename S>
Tensor<S> add_bias_nchw(const Tensor<S>& a, const Tensor<S>& bias) {
  require(a.shape().size() == 4 && bias.shape().size() == 1 && bias.dim(0) == a.dim(1),
          "add_bias_nchw: shapes " + shape_str(a.shape()) + " + " + shape_str(bias.shape()));
  int64_t B = a.dim(0), C = a.dim(1), hw = a.dim(2) * a.dim(3);
  Tensor<S> out = Tensor<S>::uninit(a.shape());
  const S* pa = a.data();
  const S* pv = bias.data();
  S* po = out.data();
  parallel_for(B * C, [&](int64_t lo, int64_t hi) {
    for (int64_t bc = lo; bc < hi; ++bc) {
      S val = pv[bc % C];
      const S* ra = pa + bc * hw;
      S* ro = po + bc * hw;
      for (int64_t i = 0; i < hw; ++i) ro[i] = ra[i] + val;
    }
  });
  if (detail::want_grad<S>({&a, &bias}))
    Tape<S>::active().record(out, {a, bias}, [](const Tensor<S>& g, const std::vector<char>&) {
      return std::vector<Tensor<S>>{g, channel_sum(g)};
    });
  return out;
}

template <typename S>
Tensor<S> spatial_sum(const Tensor<S>& a) {
  require(a.shape().size() == 4, "spatial_sum: need BCHW");
  int64_t B = a.dim(0), C = a.dim(1), hw = a.dim(2) * a.dim(3);
  Tensor<S> out = Tensor<S>::uninit({B, C});
  const S* pa = a.data();
  S* po = out.data();
  parallel_for(B * C, [&](int64_t lo, int64_t hi) {
    for (int64_t bc = lo; bc < hi; ++bc) {
      double acc = 0.0;
      const S* row = pa + bc * hw;
      for (int64_t i = 0; i < hw; ++i) acc += static_cast<double>(row[i]);
      po[bc] = static_cast<S>(acc);
    }
  }, 8);
  if (detail::want_grad<S>({&a})) {
    int64_t H = a.dim(2), W = a.dim(3);
    Tape<S>::active().record(out, {a}, [H, W](const Tensor<S>& g, const std::vector<char>&) {
      return std::vector<Tensor<S>>{spatial_bcast(g, H, W)};
    });
  }
  return out;
}

template <typename S>
Tensor<S> spatial_bcast(const Tensor<S>& e, int64_t H, int64_t W) {
  require(e.shape().size() == 2, "spatial_bcast: need (B,C)");
  int64_t B = e.dim(0), C = e.dim(1), hw = H * W;
  Tensor<S> out = Tensor<S>::uninit({B, C, H, W});
  const S* pe = e.data();
  S* po = out.data();
  parallel_for(B * C, [&](int64_t lo, int64_t hi) {
    for (int64_t bc = lo; bc < hi; ++bc) {
      S val = pe[bc];
      S* row = po + bc * hw;
      for (int64_t i = 0; i < hw; ++i) row[i] = val;
    }
  });
  if (detail::want_grad<S>({&e}))
    Tape<S>::active().record(out, {e}, [](const Tensor<S>& g, const std::vector<char>&) {
      return std::vector<Tensor<S>>{spatial_sum(g)};
    });
  return out;
}

template <typename S>
Tensor<S> colsum(const Tensor<S>& a) {
  require(a.shape().size() == 2, "colsum: need (B,N)");
  int64_t B = a.dim(0), N = a.dim(1);
  Tensor<S> out = Tensor<S>::uninit({N});
  const S* pa = a.data();
  for (int64_t j = 0; j < N; ++j) {
    double acc = 0.0;
    for (int64_t b = 0; b < B; ++b) acc += static_cast<double>(pa[b * N + j]);
    out.data()[j] = static_cast<S>(acc);
  }
  if (detail::want_grad<S>({&a})) {
    int64_t B2 = B;
    Tape<S>::active().record(out, {a}, [B2](const Tensor<S>& g, const std::vector<char>&) {
      return std::vector<Tensor<S>>{bcast_row(g, B2)};
    });
  }
  return out;
}

template <typename S>
Tensor<S> bcast_row(const Tensor<S>& v, int64_t B) {
  require(v.shape().size() == 1, "bcast_row: need 1-d");
  int64_t N = v.dim(0);
  Tensor<S> out = Tensor<S>::uninit({B, N});
  for (int64_t b = 0; b < B; ++b)
    std::memcpy(out.data() + b * N, v.data(), sizeof(S) * static_cast<size_t>(N));
  if (detail::want_grad<S>({&v}))
    Tape<S>::active().record(out, {v}, [](const Tensor<S>& g, const std::vector<char>&) {
      return std::vector<Tensor<S>>{colsum(g)};
    });
  return out;
}

template <typename S>
Tensor<S> add_rowvec(const Tensor<S>& a, const Tensor<S>& bias) {
  require(a.shape().size() == 2 && bias.shape().size() == 1 && bias.dim(0) == a.dim(1),
          "add_rowvec: shapes " + shape_str(a.shape()) + " + " + shape_str(bias.shape()));
  int64_t B = a.dim(0), N = a.dim(1);
  Tensor<S> out = Tensor<S>::uninit(a.shape());
  const S* pa = a.data();
  const S* pb = bias.data();
  S* po = out.data();
  for (int64_t b = 0; b < B; ++b)
    for (int64_t j = 0; j < N; ++j) po[b * N + j] = pa[b * N + j] + pb[j];
  if (detail::want_grad<S>({&a, &bias}))
    Tape<S>::active().record(out, {a, bias}, [](const Tensor<S>& g, const std::vector<char>&) {
      return std::vector<Tensor<S>>{g, colsum(g)};
    });
  return out;
}

// Per-sample scaling: v has shape (B), a has shape (B, ...).
template <typename S>
Tensor<S> mul_per_sample(const Tensor<S>& a, const Tensor<S>& v) {
  require(v.shape().size() == 1 && a.dim(0) == v.dim(0),
          "mul_per_sample: shapes " + shape_str(a.shape()) + " x " + shape_str(v.shape()));
  int64_t B = a.dim(0), stride = a.numel() / B;
  Tensor<S> out = Tensor<S>::uninit(a.shape());
  const S* pa = a.data();
  const S* pv = v.data();
  S* po = out.data();
  parallel_for(B, [&](int64_t lo, int64_t hi) {
    for (int64_t b = lo; b < hi; ++b) {
      S val = pv[b];
      const S* ra = pa + b * stride;
      S* ro = po + b * stride;
      for (int64_t i = 0; i < stride; ++i) ro[i] = ra[i] * val;
    }
  }, 4);
  detail::finite_check(out, "mul_per_sample");
  if (detail::want_grad<S>({&a, &v}))
    Tape<S>::active().record(out, {a, v},
                             [a, v](const Tensor<S>& g, const std::vector<char>& need) {
                               std::vector<Tensor<S>> gs(2);
                               if (need[0]) gs[0] = mul_per_sample(g, v);
                               if (need[1]) gs[1] = sample_dot(g, a);
                               return gs;
                             });
  return out;
}

template <typename S>
Tensor<S> sample_dot(const Tensor<S>& a, const Tensor<S>& b) {
  require(a.shape() == b.shape(), "sample_dot: need matching shapes");
  int64_t B = a.dim(0), stride = a.numel() / B;
  Tensor<S> out = Tensor<S>::uninit({B});
  const S* pa = a.data();
  const S* pb = b.data();
  S* po = out.data();
  parallel_for(B, [&](int64_t lo, int64_t hi) {
    for (int64_t s = lo; s < hi; ++s) {
      double acc = 0.0;
      const S* ra = pa + s * stride;
      const S* rb = pb + s * stride;
      for (int64_t i = 0; i < stride; ++i) acc += static_cast<double>(ra[i]) * rb[i];
      po[s] = static_cast<S>(acc);
    }
  }, 2);
  if (detail::want_grad<S>({&a, &b}))
    Tape<S>::active().record(out, {a, b}, [a, b](const Tensor<S>& g, const std::vector<char>&) {
      return std::vector<Tensor<S>>{mul_per_sample(b, g), mul_per_sample(a, g)};
    });
  return out;
}

// Each element replaced by the mean of its (sample, group); self-adjoint.
template <typename S>
Tensor<S> group_mean_bcast(const Tensor<S>& a, int64_t groups) {
  require(a.shape().size() == 4, "group_mean_bcast: need BCHW");
  int64_t B = a.dim(0), C = a.dim(1), hw = a.dim(2) * a.dim(3);
  require(C % groups == 0, "group_mean_bcast: group count must divide channels");
  int64_t gc = C / groups, gsz = gc * hw;
  Tensor<S> out = Tensor<S>::uninit(a.shape());
  const S* pa = a.data();
  S* po = out.data();
  parallel_for(B * groups, [&](int64_t lo, int64_t hi) {
    for (int64_t bg = lo; bg < hi; ++bg) {
      const S* row = pa + bg * gsz;
      double acc = 0.0;
      for (int64_t i = 0; i < gsz; ++i) acc += static_cast<double>(row[i]);
      S mean = static_cast<S>(acc / static_cast<double>(gsz));
      S* ro = po + bg * gsz;
      for (int64_t i = 0; i < gsz; ++i) ro[i] = mean;
    }
  }, 4);
  if (detail::want_grad<S>({&a}))
    Tape<S>::active().record(out, {a}, [groups](const Tensor<S>& g, const std::vector<char>&) {
      return std::vector<Tensor<S>>{group_mean_bcast(g, groups)};
    });
  return out;
}

// Sum over the last dimension broadcast back; self-adjoint.
template <typename S>
Tensor<S> rowsum_bcast(const Tensor<S>& a) {
  int64_t N = a.shape().back();
  int64_t R = a.numel() / N;
  Tensor<S> out = Tensor<S>::uninit(a.shape());
  const S* pa = a.data();
  S* po = out.data();
  parallel_for(R, [&](int64_t lo, int64_t hi) {
    for (int64_t r = lo; r < hi; ++r) {
      const S* row = pa + r * N;
      double acc = 0.0;
      for (int64_t i = 0; i < N; ++i) acc += static_cast<double>(row[i]);
      S v = static_cast<S>(acc);
      S* ro = po + r * N;
      for (int64_t i = 0; i < N; ++i) ro[i] = v;
    }
  }, 16);
  if (detail::want_grad<S>({&a}))
    Tape<S>::active().record(out, {a}, [](const Tensor<S>& g, const std::vector<char>&) {
      return std::vector<Tensor<S>>{rowsum_bcast(g)};
    });
  return out;
}

// Row max broadcast back, emitted as a constant (used only as the shift
// inside softmax, where the result is shift-invariant).
template <typename S>
Tensor<S> rowmax_bcast_const(const Tensor<S>& a) {
  int64_t N = a.shape().back();
  int64_t R = a.numel() / N;
  Tensor<S> out = Tensor<S>::uninit(a.shape());
  const S* pa = a.data();
  S* po = out.data();
  for (int64_t r = 0; r < R; ++r) {
    const S* row = pa + r * N;
    S m = row[0];
    for (int64_t i = 1; i < N; ++i) m = std::max(m, row[i]);
    S* ro = po + r * N;
    for (int64_t i = 0; i < N; ++i) ro[i] = m;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Dense linear algebra

template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  require(a.shape().size() == 2 && b.shape().size() == 2 && a.dim(1) == b.dim(0),
          "matmul: shapes " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  int64_t M = a.dim(0), K = a.dim(1), N = b.dim(1);
  Tensor<S> out = Tensor<S>::uninit({M, N});
  auto block = [&](int64_t lo, int64_t hi) {
    detail::CMapRM<S> A(a.data() + lo * K, hi - lo, K);
    detail::CMapRM<S> B(b.data(), K, N);
    detail::MapRM<S> O(out.data() + lo * N, hi - lo, N);
    O.noalias() = A * B;
  };
  if (M >= 64 && M * K * N > (1 << 20)) {
    ThreadPool::instance().run_chunked(M, [&](int, int64_t lo, int64_t hi) { block(lo, hi); });
  } else {
    block(0, M);
  }
  detail::finite_check(out, "matmul");
  if (detail::want_grad<S>({&a, &b}))
    Tape<S>::active().record(out, {a, b},
                             [a, b](const Tensor<S>& g, const std::vector<char>& need) {
                               std::vector<Tensor<S>> gs(2);
                               if (need[0]) gs[0] = matmul(g, transpose2(b));
                               if (need[1]) gs[1] = matmul(transpose2(a), g);
                               return gs;
                             });
  return out;
}

template <typename S>
Tensor<S> bmm(const Tensor<S>& a, const Tensor<S>& b) {
  require(a.shape().size() == 3 && b.shape().size() == 3 && a.dim(0) == b.dim(0) &&
              a.dim(2) == b.dim(1),
          "bmm: shapes " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  int64_t B = a.dim(0), M = a.dim(1), K = a.dim(2), N = b.dim(2);
  Tensor<S> out = Tensor<S>::uninit({B, M, N});
  ThreadPool::instance().run_chunked(B, [&](int, int64_t lo, int64_t hi) {
    for (int64_t i = lo; i < hi; ++i) {
      detail::CMapRM<S> A(a.data() + i * M * K, M, K);
      detail::CMapRM<S> Bm(b.data() + i * K * N, K, N);
      detail::MapRM<S> O(out.data() + i * M * N, M, N);
      O.noalias() = A * Bm;
    }
  });
  detail::finite_check(out, "bmm");
  if (detail::want_grad<S>({&a, &b}))
    Tape<S>::active().record(out, {a, b},
                             [a, b](const Tensor<S>& g, const std::vector<char>& need) {
                               std::vector<Tensor<S>> gs(2);
                               if (need[0]) gs[0] = bmm(g, btrans(b));
                               if (need[1]) gs[1] = bmm(btrans(a), g);
                               return gs;
                             });
  return out;
}

// ---------------------------------------------------------------------------
// Convolution family

namespace detail {

// Builds the [K x N] patch matrix for one sample (K = Ci*kh*kw, N = Ho*Wo).
template <typename S>
void im2col(const S* x, int64_t Ci, int64_t H, int64_t W, int kh, int kw, int stride, int pad,
            int64_t Ho, int64_t Wo, S* col) {
  int64_t N = Ho * Wo;
  for (int64_t ci = 0; ci < Ci; ++ci) {
    const S* plane = x + ci * H * W;
    for (int ky = 0; ky < kh; ++ky)
      for (int kx = 0; kx < kw; ++kx) {
        S* row = col + ((ci * kh + ky) * kw + kx) * N;
        for (int64_t oy = 0; oy < Ho; ++oy) {
          int64_t iy = oy * stride + ky - pad;
          S* dst = row + oy * Wo;
          if (iy < 0 || iy >= H) {
            for (int64_t k = 0; k < Wo; ++k) dst[k] = S(0);
            continue;
          }
          if (stride == 1) {
            // ix = ox + kx - pad stays in [0, W)
            int64_t lo = std::max<int64_t>(0, pad - kx);
            int64_t hi = std::min<int64_t>(Wo, W - kx + pad);
            const S* src = plane + iy * W + kx - pad;
            for (int64_t k = 0; k < std::min(lo, Wo); ++k) dst[k] = S(0);
            for (int64_t k = lo; k < hi; ++k) dst[k] = src[k];
            for (int64_t k = std::max<int64_t>(hi, 0); k < Wo; ++k) dst[k] = S(0);
          } else {
            for (int64_t ox = 0; ox < Wo; ++ox) {
              int64_t ix = ox * stride + kx - pad;
              dst[ox] = (ix >= 0 && ix < W) ? plane[iy * W + ix] : S(0);
            }
          }
        }
      }
  }
}

template <typename S>
std::vector<S>& col_scratch() {
  static thread_local std::vector<S> buf;
  return buf;
}

// Direct kernels for the 3x3 stride-1 pad-1 case, which covers every spatial
// convolution in the models here. One padded copy of the sample keeps all
// inner loops branch-free and avoids patch-matrix traffic entirely.
template <typename S>
std::vector<S>& pad_scratch() {
  static thread_local std::vector<S> buf;
  return buf;
}

template <typename S>
void pad_sample_3x3(const S* x, int64_t Ci, int64_t H, int64_t W, S* pad) {
  int64_t Hp = H + 2, Wp = W + 2;
  for (int64_t c = 0; c < Ci; ++c) {
    S* dst = pad + c * Hp * Wp;
    const S* src = x + c * H * W;
    for (int64_t j = 0; j < Wp; ++j) dst[j] = S(0);
    for (int64_t y = 0; y < H; ++y) {
      S* row = dst + (y + 1) * Wp;
      row[0] = S(0);
      for (int64_t j = 0; j < W; ++j) row[1 + j] = src[y * W + j];
      row[Wp - 1] = S(0);
    }
    for (int64_t j = 0; j < Wp; ++j) dst[(Hp - 1) * Wp + j] = S(0);
  }
}

inline constexpr int64_t kMaxRow = 256;  // widest supported plane for direct kernels

// Fixed-width inner kernel: an 8-channel output tile stays in registers, so
// every shifted row load feeds 24 fused multiply-adds.
template <typename S, int W>
void conv3x3_fwd_w(const S* __restrict xpad, const S* __restrict w, const S* __restrict bias,
                   S* __restrict out, int64_t Ci, int64_t Co, int64_t H) {
  constexpr int Wp = W + 2;
  const int64_t Hp = H + 2;
  constexpr int64_t TILE = 8;
  for (int64_t co0 = 0; co0 < Co; co0 += TILE) {
    for (int64_t y = 0; y < H; ++y) {
      S acc[TILE][W];
      for (int64_t t = 0; t < TILE; ++t) {
        S b = bias ? bias[co0 + t] : S(0);
        for (int j = 0; j < W; ++j) acc[t][j] = b;
      }
      for (int64_t ci = 0; ci < Ci; ++ci) {
        const S* plane = xpad + ci * Hp * Wp;
        for (int ky = 0; ky < 3; ++ky) {
          const S* __restrict row = plane + (y + ky) * Wp;
          S r0[W], r1[W], r2[W];
          for (int j = 0; j < W; ++j) {
            r0[j] = row[j];
            r1[j] = row[j + 1];
            r2[j] = row[j + 2];
          }
#pragma GCC unroll 8
          for (int64_t t = 0; t < TILE; ++t) {
            const S* wk = w + ((co0 + t) * Ci + ci) * 9 + ky * 3;
            S w0 = wk[0], w1 = wk[1], w2 = wk[2];
            for (int j = 0; j < W; ++j) acc[t][j] += w0 * r0[j] + w1 * r1[j] + w2 * r2[j];
          }
        }
      }
      for (int64_t t = 0; t < TILE; ++t) {
        S* orow = out + (co0 + t) * H * W + y * W;
        for (int j = 0; j < W; ++j) orow[j] = acc[t][j];
      }
    }
  }
}

template <typename S>
void conv3x3_fwd_sample(const S* __restrict xpad, const S* __restrict w,
                        const S* __restrict bias, S* __restrict out, int64_t Ci, int64_t Co,
                        int64_t H, int64_t W) {
  if (Co % 8 == 0) {
    if (W == 16) return conv3x3_fwd_w<S, 16>(xpad, w, bias, out, Ci, Co, H);
    if (W == 8) return conv3x3_fwd_w<S, 8>(xpad, w, bias, out, Ci, Co, H);
    if (W == 32) return conv3x3_fwd_w<S, 32>(xpad, w, bias, out, Ci, Co, H);
  }
  int64_t Wp = W + 2, Hp = H + 2;
  S acc[kMaxRow];
  for (int64_t co = 0; co < Co; ++co) {
    const S* wc = w + co * Ci * 9;
    S* oplane = out + co * H * W;
    for (int64_t y = 0; y < H; ++y) {
      S b = bias ? bias[co] : S(0);
      for (int64_t j = 0; j < W; ++j) acc[j] = b;
      for (int64_t ci = 0; ci < Ci; ++ci) {
        const S* plane = xpad + ci * Hp * Wp;
        const S* wk = wc + ci * 9;
        for (int ky = 0; ky < 3; ++ky) {
          const S* __restrict row = plane + (y + ky) * Wp;
          S w0 = wk[ky * 3], w1 = wk[ky * 3 + 1], w2 = wk[ky * 3 + 2];
          for (int64_t j = 0; j < W; ++j)
            acc[j] += w0 * row[j] + w1 * row[j + 1] + w2 * row[j + 2];
        }
      }
      S* orow = oplane + y * W;
      for (int64_t j = 0; j < W; ++j) orow[j] = acc[j];
    }
  }
}

// gw[co,ci,ky,kx] += sum_y dot(g[co,y,:], xpad[ci,y+ky,kx:kx+W]).
// Lane-wise accumulators keep the reductions vectorizable without
// reassociating float sums; fixed W keeps them in registers.
template <typename S, int W>
void conv3x3_wgrad_w(const S* __restrict xpad, const S* __restrict g, double* __restrict gw,
                     int64_t Ci, int64_t Co, int64_t H) {
  constexpr int Wp = W + 2;
  const int64_t Hp = H + 2;
  for (int64_t co = 0; co < Co; ++co) {
    const S* gplane = g + co * H * W;
    for (int64_t ci = 0; ci < Ci; ++ci) {
      const S* plane = xpad + ci * Hp * Wp;
      S lane[9][W];
      for (int k = 0; k < 9; ++k)
        for (int j = 0; j < W; ++j) lane[k][j] = S(0);
      for (int64_t y = 0; y < H; ++y) {
        const S* __restrict grow = gplane + y * W;
#pragma GCC unroll 3
        for (int ky = 0; ky < 3; ++ky) {
          const S* __restrict row = plane + (y + ky) * Wp;
          for (int j = 0; j < W; ++j) {
            lane[ky * 3][j] += grow[j] * row[j];
            lane[ky * 3 + 1][j] += grow[j] * row[j + 1];
            lane[ky * 3 + 2][j] += grow[j] * row[j + 2];
          }
        }
      }
      double* dst = gw + (co * Ci + ci) * 9;
      for (int k = 0; k < 9; ++k) {
        double s = 0;
        for (int j = 0; j < W; ++j) s += static_cast<double>(lane[k][j]);
        dst[k] += s;
      }
    }
  }
}

template <typename S>
void conv3x3_wgrad_sample(const S* __restrict xpad, const S* __restrict g, double* __restrict gw,
                          int64_t Ci, int64_t Co, int64_t H, int64_t W) {
  if (W == 16) return conv3x3_wgrad_w<S, 16>(xpad, g, gw, Ci, Co, H);
  if (W == 8) return conv3x3_wgrad_w<S, 8>(xpad, g, gw, Ci, Co, H);
  if (W == 32) return conv3x3_wgrad_w<S, 32>(xpad, g, gw, Ci, Co, H);
  int64_t Wp = W + 2, Hp = H + 2;
  S lane[9][kMaxRow];
  for (int64_t co = 0; co < Co; ++co) {
    const S* gplane = g + co * H * W;
    for (int64_t ci = 0; ci < Ci; ++ci) {
      const S* plane = xpad + ci * Hp * Wp;
      for (int k = 0; k < 9; ++k)
        for (int64_t j = 0; j < W; ++j) lane[k][j] = S(0);
      for (int64_t y = 0; y < H; ++y) {
        const S* __restrict grow = gplane + y * W;
        for (int ky = 0; ky < 3; ++ky) {
          const S* __restrict row = plane + (y + ky) * Wp;
          S* __restrict l0 = lane[ky * 3];
          S* __restrict l1 = lane[ky * 3 + 1];
          S* __restrict l2 = lane[ky * 3 + 2];
          for (int64_t j = 0; j < W; ++j) {
            l0[j] += grow[j] * row[j];
            l1[j] += grow[j] * row[j + 1];
            l2[j] += grow[j] * row[j + 2];
          }
        }
      }
      double* dst = gw + (co * Ci + ci) * 9;
      for (int k = 0; k < 9; ++k) {
        double s = 0;
        for (int64_t j = 0; j < W; ++j) s += static_cast<double>(lane[k][j]);
        dst[k] += s;
      }
    }
  }
}

}  // namespace detail

namespace detail {

// Shared convolution forward. Optionally retains the per-sample patch
// matrices so the weight gradient can skip rebuilding them.
template <typename S>
struct ConvFwd {
  Tensor<S> out;
  std::shared_ptr<AVec<S>> cols;
};

template <typename S>
ConvFwd<S> conv2d_core(const Tensor<S>& x, const Tensor<S>& w, int stride, int pad,
                       bool keep_col, const Tensor<S>* bias) {
  require(x.shape().size() == 4 && w.shape().size() == 4,
          "conv2d: need BCHW input and OIHW weight");
  require(x.dim(1) == w.dim(1), "conv2d: channel mismatch " + shape_str(x.shape()) + " vs " +
                                    shape_str(w.shape()));
  require(stride == 1 || stride == 2, "conv2d: stride must be 1 or 2");
  int64_t B = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
  int64_t Co = w.dim(0);
  int kh = static_cast<int>(w.dim(2)), kw = static_cast<int>(w.dim(3));
  int64_t span_h = H + 2 * pad - kh, span_w = W + 2 * pad - kw;
  require(span_h >= 0 && span_w >= 0 && span_h % stride == 0 && span_w % stride == 0,
          "conv2d: kernel/stride does not tile the padded input");
  int64_t Ho = span_h / stride + 1, Wo = span_w / stride + 1;
  int64_t K = Ci * kh * kw, N = Ho * Wo;
  bool pointwise = kh == 1 && kw == 1 && stride == 1 && pad == 0;

  bool direct3x3 = kh == 3 && kw == 3 && stride == 1 && pad == 1 && W + 2 <= kMaxRow;

  ConvFwd<S> res;
  res.out = Tensor<S>::uninit({B, Co, Ho, Wo});
  Tensor<S>& out = res.out;
  keep_col = keep_col && !pointwise && !direct3x3;
  if (keep_col)
    res.cols = std::make_shared<AVec<S>>(BufferPool<S>::instance().get(B * K * N, false));
  const S* pb = bias ? bias->data() : nullptr;
  ThreadPool::instance().run_chunked(B, [&](int, int64_t lo, int64_t hi) {
    auto& scratch = col_scratch<S>();
    if (!pointwise && !direct3x3 && !keep_col) scratch.resize(static_cast<size_t>(K * N));
    auto& padbuf = pad_scratch<S>();
    if (direct3x3) padbuf.resize(static_cast<size_t>(Ci * (H + 2) * (W + 2)));
    for (int64_t b = lo; b < hi; ++b) {
      if (direct3x3) {
        pad_sample_3x3(x.data() + b * Ci * H * W, Ci, H, W, padbuf.data());
        conv3x3_fwd_sample(padbuf.data(), w.data(), pb, out.data() + b * Co * N, Ci, Co, H, W);
        continue;
      }
      CMapRM<S> Wm(w.data(), Co, K);
      MapRM<S> Om(out.data() + b * Co * N, Co, N);
      if (pointwise) {
        CMapRM<S> Xm(x.data() + b * Ci * N, Ci, N);
        Om.noalias() = Wm * Xm;
      } else {
        S* col = keep_col ? res.cols->data() + b * K * N : scratch.data();
        im2col(x.data() + b * Ci * H * W, Ci, H, W, kh, kw, stride, pad, Ho, Wo, col);
        CMapRM<S> Cm(col, K, N);
        Om.noalias() = Wm * Cm;
      }
      if (pb) {
        S* obase = out.data() + b * Co * N;
        for (int64_t c = 0; c < Co; ++c) {
          S v = pb[c];
          S* row = obase + c * N;
          for (int64_t i = 0; i < N; ++i) row[i] += v;
        }
      }
    }
  });
  finite_check(out, "conv2d");
  return res;
}

}  // namespace detail

// x: (B,Ci,H,W), w: (Co,Ci,kh,kw). Zero padding. 1x1 kernels skip the patch
// matrix and multiply the input planes directly.
template <typename S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& w, int stride, int pad) {
  bool rec = detail::want_grad<S>({&x, &w});
  auto fwd = detail::conv2d_core<S>(x, w, stride, pad, false, nullptr);
  if (rec) {
    int s = stride, p = pad;
    int kh = static_cast<int>(w.dim(2)), kw = static_cast<int>(w.dim(3));
    int64_t H = x.dim(2), W = x.dim(3);
    auto cols = fwd.cols;
    Tape<S>::active().record(
        fwd.out, {x, w},
        [x, w, cols, s, p, kh, kw, H, W](const Tensor<S>& g, const std::vector<char>& need) {
          std::vector<Tensor<S>> gs(2);
          if (need[0]) {
            Tensor<S> gg = g;
            if (s != 1) gg = zero_stuff(g, s, H + 2 * p - kh + 1, W + 2 * p - kw + 1);
            gs[0] = conv2d(gg, rot180_swap(w), 1, kh - 1 - p);
          }
          if (need[1]) gs[1] = conv2d_wgrad(x, g, kh, kw, s, p, cols.get());
          return gs;
        });
  }
  return fwd.out;
}

// Convolution with the channel bias folded into the same tape entry.
template <typename S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& bias, int stride,
                 int pad) {
  require(bias.shape().size() == 1 && bias.dim(0) == w.dim(0), "conv2d: bad bias shape");
  bool rec = detail::want_grad<S>({&x, &w, &bias});
  auto fwd = detail::conv2d_core<S>(x, w, stride, pad, false, &bias);
  if (rec) {
    int s = stride, p = pad;
    int kh = static_cast<int>(w.dim(2)), kw = static_cast<int>(w.dim(3));
    int64_t H = x.dim(2), W = x.dim(3);
    auto cols = fwd.cols;
    Tape<S>::active().record(
        fwd.out, {x, w, bias},
        [x, w, cols, s, p, kh, kw, H, W](const Tensor<S>& g, const std::vector<char>& need) {
          std::vector<Tensor<S>> gs(3);
          if (need[0]) {
            Tensor<S> gg = g;
            if (s != 1) gg = zero_stuff(g, s, H + 2 * p - kh + 1, W + 2 * p - kw + 1);
            gs[0] = conv2d(gg, rot180_swap(w), 1, kh - 1 - p);
          }
          if (need[1]) gs[1] = conv2d_wgrad(x, g, kh, kw, s, p, cols.get());
          if (need[2]) gs[2] = channel_sum(g);
          return gs;
        });
  }
  return fwd.out;
}

// Gradient of conv2d w.r.t. its weight. Executed while evaluating backward
// passes; differentiating through it is not supported (and never needed,
// because gradient targets prune weight branches).
template <typename S>
Tensor<S> conv2d_wgrad(const Tensor<S>& x, const Tensor<S>& g, int kh, int kw, int stride,
                       int pad, const AVec<S>* cached_cols) {
  int64_t B = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
  int64_t Co = g.dim(1), Ho = g.dim(2), Wo = g.dim(3);
  int64_t K = Ci * kh * kw, N = Ho * Wo;
  bool pointwise = kh == 1 && kw == 1 && stride == 1 && pad == 0;
  // Direct accumulation wins on wide rows; narrow planes are reduction-
  // overhead bound and go through the patch-matrix route instead.
  bool direct3x3 =
      kh == 3 && kw == 3 && stride == 1 && pad == 1 && W >= 16 && W + 2 <= detail::kMaxRow;
  int nchunks = ThreadPool::instance().nthreads();
  std::vector<std::vector<double>> partial(static_cast<size_t>(nchunks));
  ThreadPool::instance().run_chunked(B, [&](int chunk, int64_t lo, int64_t hi) {
    auto& acc = partial[static_cast<size_t>(chunk)];
    acc.assign(static_cast<size_t>(Co * K), 0.0);
    if (direct3x3) {
      auto& padbuf = detail::pad_scratch<S>();
      padbuf.resize(static_cast<size_t>(Ci * (H + 2) * (W + 2)));
      for (int64_t b = lo; b < hi; ++b) {
        detail::pad_sample_3x3(x.data() + b * Ci * H * W, Ci, H, W, padbuf.data());
        detail::conv3x3_wgrad_sample(padbuf.data(), g.data() + b * Co * N, acc.data(), Ci, Co, H,
                                     W);
      }
      return;
    }
    auto& col = detail::col_scratch<S>();
    if (!pointwise && !cached_cols) col.resize(static_cast<size_t>(K * N));
    detail::MatRM<S> gw = detail::MatRM<S>::Zero(Co, K);
    for (int64_t b = lo; b < hi; ++b) {
      detail::CMapRM<S> Gm(g.data() + b * Co * N, Co, N);
      if (pointwise) {
        detail::CMapRM<S> Xm(x.data() + b * Ci * N, Ci, N);
        gw.noalias() += Gm * Xm.transpose();
      } else {
        const S* cp;
        if (cached_cols) {
          cp = cached_cols->data() + b * K * N;
        } else {
          detail::im2col(x.data() + b * Ci * H * W, Ci, H, W, kh, kw, stride, pad, Ho, Wo,
                         col.data());
          cp = col.data();
        }
        detail::CMapRM<S> Cm(cp, K, N);
        gw.noalias() += Gm * Cm.transpose();
      }
    }
    for (int64_t i = 0; i < Co * K; ++i) acc[static_cast<size_t>(i)] = static_cast<double>(gw.data()[i]);
  });
  Tensor<S> out = Tensor<S>::zeros({Co, Ci, kh, kw});
  for (int c = 0; c < nchunks; ++c) {
    if (partial[static_cast<size_t>(c)].empty()) continue;
    for (int64_t i = 0; i < Co * K; ++i)
      out.data()[i] += static_cast<S>(partial[static_cast<size_t>(c)][static_cast<size_t>(i)]);
  }
  if (detail::want_grad<S>({&x, &g}))
    Tape<S>::active().record(out, {x, g}, [](const Tensor<S>&, const std::vector<char>&) -> std::vector<Tensor<S>> {
      throw TapeError("second derivative through conv weight gradients is not supported");
    });
  return out;
}

// (Co,Ci,kh,kw) -> (Ci,Co,kh,kw) with both kernel axes flipped. A fixed
// permutation, equal to its own adjoint and inverse.
template <typename S>
Tensor<S> rot180_swap(const Tensor<S>& w) {
  require(w.shape().size() == 4, "rot180_swap: need OIHW");
  int64_t Co = w.dim(0), Ci = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  Tensor<S> out = Tensor<S>::uninit({Ci, Co, kh, kw});
  const S* pw = w.data();
  S* po = out.data();
  for (int64_t o = 0; o < Co; ++o)
    for (int64_t i = 0; i < Ci; ++i)
      for (int64_t y = 0; y < kh; ++y)
        for (int64_t x2 = 0; x2 < kw; ++x2)
          po[((i * Co + o) * kh + (kh - 1 - y)) * kw + (kw - 1 - x2)] =
              pw[((o * Ci + i) * kh + y) * kw + x2];
  if (detail::want_grad<S>({&w}))
    Tape<S>::active().record(out, {w}, [](const Tensor<S>& g, const std::vector<char>&) {
      return std::vector<Tensor<S>>{rot180_swap(g)};
    });
  return out;
}

// Inserts stride-1 zeros between entries; adjoint of strided subsampling.
template <typename S>
Tensor<S> zero_stuff(const Tensor<S>& x, int stride, int64_t Hs, int64_t Ws) {
  int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  require((H - 1) * stride < Hs && (W - 1) * stride < Ws, "zero_stuff: target too small");
  Tensor<S> out = Tensor<S>::zeros({B, C, Hs, Ws});
  const S* px = x.data();
  S* po = out.data();
  for (int64_t bc = 0; bc < B * C; ++bc)
    for (int64_t y = 0; y < H; ++y)
      for (int64_t x2 = 0; x2 < W; ++x2)
        po[(bc * Hs + y * stride) * Ws + x2 * stride] = px[(bc * H + y) * W + x2];
  if (detail::want_grad<S>({&x})) {
    int st = stride;
    int64_t H2 = H, W2 = W;
    Tape<S>::active().record(out, {x}, [st, H2, W2](const Tensor<S>& g, const std::vector<char>&) {
      return std::vector<Tensor<S>>{subsample_st(g, st, H2, W2)};
    });
  }
  return out;
}

template <typename S>
Tensor<S> subsample_st(const Tensor<S>& x, int stride, int64_t Ho, int64_t Wo) {
  int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  require((Ho - 1) * stride < H && (Wo - 1) * stride < W, "subsample_st: source too small");
  Tensor<S> out = Tensor<S>::uninit({B, C, Ho, Wo});
  const S* px = x.data();
  S* po = out.data();
  for (int64_t bc = 0; bc < B * C; ++bc)
    for (int64_t y = 0; y < Ho; ++y)
      for (int64_t x2 = 0; x2 < Wo; ++x2)
        po[(bc * Ho + y) * Wo + x2] = px[(bc * H + y * stride) * W + x2 * stride];
  if (detail::want_grad<S>({&x})) {
    int st = stride;
    int64_t H2 = H, W2 = W;
    Tape<S>::active().record(out, {x}, [st, H2, W2](const Tensor<S>& g, const std::vector<char>&) {
      return std::vector<Tensor<S>>{zero_stuff(g, st, H2, W2)};
    });
  }
  return out;
}

template <typename S>
Tensor<S> avgpool2(const Tensor<S>& x) {
  require(x.shape().size() == 4 && x.dim(2) % 2 == 0 && x.dim(3) % 2 == 0,
          "avgpool2: spatial dims must be even, got " + shape_str(x.shape()));
  int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  int64_t Ho = H / 2, Wo = W / 2;
  Tensor<S> out = Tensor<S>::uninit({B, C, Ho, Wo});
  const S* px = x.data();
  S* po = out.data();
  parallel_for(B * C, [&](int64_t lo, int64_t hi) {
    for (int64_t bc = lo; bc < hi; ++bc)
      for (int64_t y = 0; y < Ho; ++y)
        for (int64_t x2 = 0; x2 < Wo; ++x2) {
          const S* base = px + (bc * H + 2 * y) * W + 2 * x2;
          po[(bc * Ho + y) * Wo + x2] =
              static_cast<S>(0.25) * (base[0] + base[1] + base[W] + base[W + 1]);
        }
  }, 4);
  if (detail::want_grad<S>({&x}))
    Tape<S>::active().record(out, {x}, [](const Tensor<S>& g, const std::vector<char>&) {
      return std::vector<Tensor<S>>{mul_scalar(upsample2(g), 0.25)};
    });
  return out;
}

template <typename S>
Tensor<S> upsample2(const Tensor<S>& x) {
  require(x.shape().size() == 4, "upsample2: need BCHW");
  int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  int64_t Ho = H * 2, Wo = W * 2;
  Tensor<S> out = Tensor<S>::uninit({B, C, Ho, Wo});
  const S* px = x.data();
  S* po = out.data();
  parallel_for(B * C, [&](int64_t lo, int64_t hi) {
    for (int64_t bc = lo; bc < hi; ++bc)
      for (int64_t y = 0; y < Ho; ++y)
        for (int64_t x2 = 0; x2 < Wo; ++x2)
          po[(bc * Ho + y) * Wo + x2] = px[(bc * H + y / 2) * W + x2 / 2];
  }, 4);
  if (detail::want_grad<S>({&x}))
    Tape<S>::active().record(out, {x}, [](const Tensor<S>& g, const std::vector<char>&) {
      return std::vector<Tensor<S>>{mul_scalar(avgpool2(g), 4.0)};
    });
  return out;
}

// ---------------------------------------------------------------------------
// Embedding lookup (adjoint pair with scatter)

template <typename S>
Tensor<S> embed_rows(const Tensor<S>& table, const std::vector<int64_t>& ids) {
  require(table.shape().size() == 2, "embed_rows: need (K,D) table");
  int64_t K = table.dim(0), D = table.dim(1);
  int64_t B = static_cast<int64_t>(ids.size());
  Tensor<S> out = Tensor<S>::uninit({B, D});
  for (int64_t b = 0; b < B; ++b) {
    require(ids[static_cast<size_t>(b)] >= 0 && ids[static_cast<size_t>(b)] < K,
            "embed_rows: id out of range");
    std::memcpy(out.data() + b * D, table.data() + ids[static_cast<size_t>(b)] * D,
                sizeof(S) * static_cast<size_t>(D));
  }
  if (detail::want_grad<S>({&table})) {
    auto ids_copy = ids;
    Tape<S>::active().record(out, {table}, [ids_copy, K](const Tensor<S>& g, const std::vector<char>&) {
      return std::vector<Tensor<S>>{embed_scatter(g, ids_copy, K)};
    });
  }
  return out;
}

template <typename S>
Tensor<S> embed_scatter(const Tensor<S>& g, const std::vector<int64_t>& ids, int64_t rows) {
  require(g.shape().size() == 2 && g.dim(0) == static_cast<int64_t>(ids.size()),
          "embed_scatter: shape mismatch");
  int64_t D = g.dim(1);
  Tensor<S> out = Tensor<S>::zeros({rows, D});
  for (size_t b = 0; b < ids.size(); ++b) {
    S* dst = out.data() + ids[b] * D;
    const S* src = g.data() + static_cast<int64_t>(b) * D;
    for (int64_t j = 0; j < D; ++j) dst[j] += src[j];
  }
  if (detail::want_grad<S>({&g})) {
    auto ids_copy = ids;
    Tape<S>::active().record(out, {g}, [ids_copy](const Tensor<S>& gg, const std::vector<char>&) {
      return std::vector<Tensor<S>>{embed_rows(gg, ids_copy)};
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Composites

template <typename S>
Tensor<S> linear(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b) {
  return add_rowvec(matmul(x, w), b);
}

// Reference formulation built from primitives; differentiable to any order.
template <typename S>
Tensor<S> group_norm_ref(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta,
                         int64_t groups, double eps = 1e-5) {
  require(x.dim(1) % groups == 0, "group_norm: group count must divide channels");
  Tensor<S> mu = group_mean_bcast(x, groups);
  Tensor<S> xc = sub(x, mu);
  Tensor<S> var = group_mean_bcast(mul(xc, xc), groups);
  Tensor<S> xhat = mul(xc, rsqrt(add_scalar(var, eps)));
  return add_bias_nchw(mul_channel(xhat, gamma), beta);
}

// Fused group normalization. Backward is hand-written (first-order only);
// matches group_norm_ref to rounding.
template <typename S>
Tensor<S> group_norm(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta,
                     int64_t groups, double eps = 1e-5) {
  require(x.shape().size() == 4, "group_norm: need BCHW");
  int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  require(C % groups == 0, "group_norm: group count must divide channels");
  require(gamma.shape() == Shape{C} && beta.shape() == Shape{C}, "group_norm: bad affine shapes");
  int64_t gc = C / groups, hw = H * W, gsz = gc * hw;
  Tensor<S> out = Tensor<S>::uninit(x.shape());
  // per (sample, group): mean and inverse stddev, kept for the backward
  auto stats = std::make_shared<std::vector<double>>(static_cast<size_t>(2 * B * groups));
  const S* px = x.data();
  const S* pg = gamma.data();
  const S* pb = beta.data();
  S* po = out.data();
  ThreadPool::instance().run_chunked(B * groups, [&](int, int64_t lo, int64_t hi) {
    for (int64_t bg = lo; bg < hi; ++bg) {
      const S* base = px + bg * gsz;
      double sum = 0, sq = 0;
      for (int64_t i = 0; i < gsz; ++i) {
        double v = static_cast<double>(base[i]);
        sum += v;
        sq += v * v;
      }
      double mean = sum / static_cast<double>(gsz);
      double var = std::max(0.0, sq / static_cast<double>(gsz) - mean * mean);
      double inv = 1.0 / std::sqrt(var + eps);
      (*stats)[static_cast<size_t>(2 * bg)] = mean;
      (*stats)[static_cast<size_t>(2 * bg + 1)] = inv;
      int64_t c0 = (bg % groups) * gc;
      S* dst = po + bg * gsz;
      for (int64_t c = 0; c < gc; ++c) {
        S a = static_cast<S>(pg[c0 + c] * inv), sh = static_cast<S>(pb[c0 + c] - pg[c0 + c] * inv * mean);
        const S* row = base + c * hw;
        S* drow = dst + c * hw;
        for (int64_t i = 0; i < hw; ++i) drow[i] = a * row[i] + sh;
      }
    }
  });
  detail::finite_check(out, "group_norm");
  if (detail::want_grad<S>({&x, &gamma, &beta})) {
    Tape<S>::active().record(
        out, {x, gamma, beta},
        [x, gamma, stats, B, C, groups, gc, hw, gsz](const Tensor<S>& g,
                                                     const std::vector<char>& need) {
          if (grad_enabled())
            throw TapeError("group_norm: second derivatives need group_norm_ref");
          std::vector<Tensor<S>> gs(3);
          Tensor<S> gx = Tensor<S>::uninit(x.shape());
          int nchunks = ThreadPool::instance().nthreads();
          std::vector<std::vector<double>> pgamma(static_cast<size_t>(nchunks)),
              pbeta(static_cast<size_t>(nchunks));
          const S* px = x.data();
          const S* pgm = gamma.data();
          const S* pgr = g.data();
          S* pgx = gx.data();
          ThreadPool::instance().run_chunked(B * groups, [&](int chunk, int64_t lo, int64_t hi) {
            auto& ag = pgamma[static_cast<size_t>(chunk)];
            auto& ab = pbeta[static_cast<size_t>(chunk)];
            if (ag.empty()) {
              ag.assign(static_cast<size_t>(C), 0.0);
              ab.assign(static_cast<size_t>(C), 0.0);
            }
            for (int64_t bg = lo; bg < hi; ++bg) {
              double mean = (*stats)[static_cast<size_t>(2 * bg)];
              double inv = (*stats)[static_cast<size_t>(2 * bg + 1)];
              int64_t c0 = (bg % groups) * gc;
              const S* xb = px + bg * gsz;
              const S* gb = pgr + bg * gsz;
              // accumulate affine grads and the two group reductions
              double dot = 0, sumg = 0;
              for (int64_t c = 0; c < gc; ++c) {
                const S* xr = xb + c * hw;
                const S* gr = gb + c * hw;
                double w = static_cast<double>(pgm[c0 + c]);
                double lg = 0, lb = 0;
                for (int64_t i = 0; i < hw; ++i) {
                  double xh = (static_cast<double>(xr[i]) - mean) * inv;
                  double gv = static_cast<double>(gr[i]);
                  lg += gv * xh;
                  lb += gv;
                  dot += w * gv * xh;
                  sumg += w * gv;
                }
                ag[static_cast<size_t>(c0 + c)] += lg;
                ab[static_cast<size_t>(c0 + c)] += lb;
              }
              double mdot = dot / static_cast<double>(gsz);
              double msum = sumg / static_cast<double>(gsz);
              S* gxb = pgx + bg * gsz;
              for (int64_t c = 0; c < gc; ++c) {
                const S* xr = xb + c * hw;
                const S* gr = gb + c * hw;
                double w = static_cast<double>(pgm[c0 + c]);
                for (int64_t i = 0; i < hw; ++i) {
                  double xh = (static_cast<double>(xr[i]) - mean) * inv;
                  gxb[c * hw + i] =
                      static_cast<S>(inv * (w * static_cast<double>(gr[i]) - msum - xh * mdot));
                }
              }
            }
          });
          if (need[0]) gs[0] = gx;
          if (need[1] || need[2]) {
            Tensor<S> ggamma = Tensor<S>::zeros({C});
            Tensor<S> gbeta = Tensor<S>::zeros({C});
            for (int c2 = 0; c2 < nchunks; ++c2) {
              if (pgamma[static_cast<size_t>(c2)].empty()) continue;
              for (int64_t c = 0; c < C; ++c) {
                ggamma.data()[c] += static_cast<S>(pgamma[static_cast<size_t>(c2)][static_cast<size_t>(c)]);
                gbeta.data()[c] += static_cast<S>(pbeta[static_cast<size_t>(c2)][static_cast<size_t>(c)]);
              }
            }
            gs[1] = ggamma;
            gs[2] = gbeta;
          }
          return gs;
        });
  }
  return out;
}

template <typename S>
Tensor<S> softmax_lastdim(const Tensor<S>& a) {
  Tensor<S> shifted = sub(a, rowmax_bcast_const(a));
  Tensor<S> e = exp(shifted);
  return mul(e, recip(rowsum_bcast(e)));
}

// Squared L2 over everything, as a scalar.
template <typename S>
Tensor<S> sum_sq(const Tensor<S>& a) {
  return sum_all(mul(a, a));
}

template <typename S>
Tensor<S> mse(const Tensor<S>& a, const Tensor<S>& b) {
  Tensor<S> d = sub(a, b);
  return mean_all(mul(d, d));
}

template <typename S>
Tensor<S> Tape<S>::accumulate(const Tensor<S>& a, const Tensor<S>& b, bool create_graph) {
  if (create_graph) return d2o::add(a, b);
  NoGradGuard ng;
  return d2o::add(a, b);
}

}  // namespace d2o
