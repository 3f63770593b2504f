#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <d2o/adam.hpp>
#include <d2o/grad_check.hpp>
#include <d2o/ops.hpp>

using namespace d2o;
using T = Tensor<double>;
using Tf = Tensor<float>;

namespace {

// Direct-loop convolution, the reference the fast path must match.
template <typename S>
Tensor<S> ref_conv2d(const Tensor<S>& x, const Tensor<S>& w, int stride, int pad) {
  int64_t B = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
  int64_t Co = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  int64_t Ho = (H + 2 * pad - kh) / stride + 1;
  int64_t Wo = (W + 2 * pad - kw) / stride + 1;
  auto out = Tensor<S>::zeros({B, Co, Ho, Wo});
  for (int64_t b = 0; b < B; ++b)
    for (int64_t o = 0; o < Co; ++o)
      for (int64_t oy = 0; oy < Ho; ++oy)
        for (int64_t ox = 0; ox < Wo; ++ox) {
          double acc = 0;
          for (int64_t i = 0; i < Ci; ++i)
            for (int64_t ky = 0; ky < kh; ++ky)
              for (int64_t kx = 0; kx < kw; ++kx) {
                int64_t iy = oy * stride + ky - pad;
                int64_t ix = ox * stride + kx - pad;
                if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
                acc += static_cast<double>(x.data()[((b * Ci + i) * H + iy) * W + ix]) *
                       w.data()[((o * Ci + i) * kh + ky) * kw + kx];
              }
          out.data()[((b * Co + o) * Ho + oy) * Wo + ox] = static_cast<S>(acc);
        }
  return out;
}

double rel_diff(const T& a, const T& b) {
  REQUIRE(a.shape() == b.shape());
  double worst = 0;
  for (int64_t i = 0; i < a.numel(); ++i) {
    double d = std::abs(a.data()[i] - b.data()[i]);
    worst = std::max(worst, d / std::max(1.0, std::abs(b.data()[i])));
  }
  return worst;
}

T randn(Shape shape, uint64_t seed) {
  RngState rng(seed);
  return T::normal(rng, std::move(shape));
}

}  // namespace

TEST_CASE("rng: determinism and moments") {
  RngState a(42), b(42);
  auto ta = T::normal(a, {64});
  auto tb = T::normal(b, {64});
  CHECK(ta.values() == tb.values());

  RngState c(43);
  auto tc = T::normal(c, {64});
  bool same = true;
  for (int i = 0; i < 64; ++i) same = same && ta.data()[i] == tc.data()[i];
  CHECK_FALSE(same);

  RngState big(7);
  const int64_t n = 1000000;
  auto draws = T::normal(big, {n});
  double mean = 0, var = 0;
  for (int64_t i = 0; i < n; ++i) mean += draws.data()[i];
  mean /= n;
  for (int64_t i = 0; i < n; ++i) var += (draws.data()[i] - mean) * (draws.data()[i] - mean);
  var /= (n - 1);
  CHECK(std::abs(mean) < 5e-3);
  CHECK(std::abs(var - 1.0) < 1e-2);

  RngState s(9);
  uint64_t c0 = s.counter;
  s.next_u64();
  CHECK(s.counter == c0 + 1);
}

TEST_CASE("forward op examples") {
  auto x = randn({2, 3}, 1);
  auto y = add(x, zeros_like(x));
  CHECK(y.values() == x.values());

  auto ones4 = T::full({1, 1, 4, 4}, 1.0);
  auto pooled = avgpool2(ones4);
  CHECK(pooled.shape() == Shape{1, 1, 2, 2});
  for (int i = 0; i < 4; ++i) CHECK(pooled.data()[i] == doctest::Approx(1.0));

  // 3x3 all-ones image, 3x3 all-ones kernel, pad 1: overlap counts.
  auto img = T::full({1, 1, 3, 3}, 1.0);
  auto ker = T::full({1, 1, 3, 3}, 1.0);
  auto out = conv2d(img, ker, 1, 1);
  CHECK(out.data()[4] == doctest::Approx(9.0));  // center
  CHECK(out.data()[0] == doctest::Approx(4.0));  // corner
  CHECK(out.data()[1] == doctest::Approx(6.0));  // edge
}

TEST_CASE("conv2d matches direct loops") {
  for (int stride : {1, 2}) {
    for (int pad : {0, 1}) {
      int64_t H = stride == 1 ? 7 : 9;
      if ((H + 2 * pad - 3) % stride != 0) H += 1;
      auto x = randn({2, 3, H, H}, 100 + stride * 10 + pad);
      auto w = randn({4, 3, 3, 3}, 200 + stride * 10 + pad);
      auto fast = conv2d(x, w, stride, pad);
      auto ref = ref_conv2d(x, w, stride, pad);
      CHECK(rel_diff(fast, ref) < 1e-5);
    }
  }
  // 1x1 kernels, used on skip paths and heads
  auto x = randn({2, 4, 6, 6}, 11);
  auto w = randn({5, 4, 1, 1}, 12);
  CHECK(rel_diff(conv2d(x, w, 1, 0), ref_conv2d(x, w, 1, 0)) < 1e-5);
}

TEST_CASE("backward examples") {
  Tape<double>& tape = Tape<double>::active();
  tape.clear();

  auto x = randn({2, 2}, 3).set_requires_grad(true);
  auto loss = sum_all(x);
  tape.backward(loss);
  for (int i = 0; i < 4; ++i) CHECK(x.grad_buf()[i] == doctest::Approx(1.0));

  tape.clear();
  auto p = T::from({1.0, 2.0}, {2}, true);
  auto l2 = sum_all(mul(p, p));
  tape.backward(l2);
  CHECK(p.grad_buf()[0] == doctest::Approx(2.0));
  CHECK(p.grad_buf()[1] == doctest::Approx(4.0));

  // repeated backward accumulates
  tape.backward(l2);
  CHECK(p.grad_buf()[0] == doctest::Approx(4.0));
  p.zero_grad();
  CHECK(p.grad_buf()[0] == 0.0);
  tape.clear();
}

TEST_CASE("backward error conditions") {
  Tape<double>& tape = Tape<double>::active();
  tape.clear();
  auto x = randn({2, 2}, 5).set_requires_grad(true);
  auto y = mul(x, x);
  CHECK_THROWS_AS(tape.backward(y), TapeError);  // not scalar

  auto constant = T::scalar(1.0);
  CHECK_THROWS_AS(tape.backward(constant), TapeError);  // detached
  tape.clear();
}

TEST_CASE("tape stays topologically ordered") {
  Tape<double>& tape = Tape<double>::active();
  tape.clear();
  auto x = randn({4, 4}, 6).set_requires_grad(true);
  auto y = mul(silu(x), add_scalar(x, 1.0));
  auto z = sum_all(group_norm(reshape(y, {1, 4, 2, 2}), T::full({4}, 1.0), T::zeros({4}), 2));
  (void)z;
  for (size_t i = 0; i < tape.size(); ++i)
    for (const auto& par : tape.entry(i).parents)
      if (par->tape_id >= 0) CHECK(par->tape_id < static_cast<int64_t>(i));
  tape.clear();
}

TEST_CASE("stop-gradient isolation") {
  Tape<double>& tape = Tape<double>::active();
  tape.clear();
  auto a = randn({3}, 7).set_requires_grad(true);
  auto b = randn({3}, 8).set_requires_grad(true);
  auto loss = sum_all(add(mul(a, stop_grad(mul(b, b))), zeros_like(a)));
  tape.backward(loss);
  CHECK_FALSE(b.has_grad());
  auto gb = tape.grad(loss, {b})[0];
  for (int i = 0; i < 3; ++i) CHECK(gb.data()[i] == 0.0);
  tape.clear();
}

TEST_CASE("grad_check on every primitive") {
  Tape<double>& tape = Tape<double>::active();
  tape.clear();

  auto probe = [&](const char* name, Shape shape,
                   std::function<T(const T&)> fn, double offset = 0.0) {
    auto x0 = randn(shape, fnv1a64(name, strlen(name)));
    if (offset != 0.0)
      for (int64_t i = 0; i < x0.numel(); ++i) x0.data()[i] = std::abs(x0.data()[i]) + offset;
    double err = grad_check<double>(fn, x0);
    INFO(name);
    CHECK(err < 1e-4);
  };

  auto other = randn({2, 3, 4, 4}, 999);
  probe("add", {2, 3, 4, 4}, [&](const T& x) { return sum_all(mul(add(x, other), other)); });
  probe("sub", {2, 3, 4, 4}, [&](const T& x) { return sum_all(mul(sub(other, x), x)); });
  probe("mul", {2, 3, 4, 4}, [&](const T& x) { return sum_all(mul(x, mul(x, other))); });
  probe("scalar", {3, 3}, [&](const T& x) { return sum_all(mul_scalar(add_scalar(x, 0.7), -1.3)); });
  probe("sigmoid", {2, 5}, [&](const T& x) { return sum_all(mul(sigmoid(x), x)); });
  probe("exp", {2, 5}, [&](const T& x) { return sum_all(exp(mul_scalar(x, 0.3))); });
  probe("log", {2, 5}, [&](const T& x) { return sum_all(log(x)); }, 0.5);
  probe("recip", {2, 5}, [&](const T& x) { return sum_all(recip(x)); }, 0.5);
  probe("rsqrt", {2, 5}, [&](const T& x) { return sum_all(rsqrt(x)); }, 0.5);
  probe("softplus", {2, 5}, [&](const T& x) { return sum_all(mul(softplus(x), x)); });
  probe("leaky", {2, 5}, [&](const T& x) { return sum_all(mul(leaky_relu(x), x)); }, 0.1);
  probe("silu", {2, 5}, [&](const T& x) { return sum_all(silu(x)); });
  probe("reshape", {2, 6}, [&](const T& x) { return sum_all(mul(reshape(x, {3, 4}), reshape(x, {3, 4}))); });
  probe("matmul", {3, 4}, [&](const T& x) {
    auto w = randn({4, 2}, 1010);
    return sum_sq(matmul(x, w));
  });
  probe("bmm", {2, 3, 4}, [&](const T& x) {
    auto w = randn({2, 4, 2}, 1011);
    return sum_sq(bmm(x, w));
  });
  probe("transpose2", {3, 4}, [&](const T& x) { return sum_sq(transpose2(x)); });
  probe("btrans", {2, 3, 4}, [&](const T& x) { return sum_sq(btrans(x)); });
  probe("conv_s1", {2, 3, 5, 5}, [&](const T& x) {
    auto w = randn({4, 3, 3, 3}, 1012);
    return sum_sq(conv2d(x, w, 1, 1));
  });
  probe("conv_s1_wgrad", {4, 3, 3, 3}, [&](const T& w) {
    auto x = randn({2, 3, 5, 5}, 1013);
    return sum_sq(conv2d(x, w, 1, 1));
  });
  probe("conv_s2", {1, 2, 6, 6}, [&](const T& x) {
    auto w = randn({3, 2, 2, 2}, 1014);
    return sum_sq(conv2d(x, w, 2, 0));
  });
  probe("conv_s2_wgrad", {3, 2, 2, 2}, [&](const T& w) {
    auto x = randn({1, 2, 6, 6}, 1015);
    return sum_sq(conv2d(x, w, 2, 0));
  });
  probe("avgpool", {2, 2, 4, 4}, [&](const T& x) { return sum_sq(avgpool2(x)); });
  probe("upsample", {2, 2, 3, 3}, [&](const T& x) { return sum_sq(upsample2(x)); });
  probe("zero_stuff", {1, 2, 3, 3}, [&](const T& x) { return sum_sq(zero_stuff(x, 2, 5, 5)); });
  probe("subsample", {1, 2, 5, 5}, [&](const T& x) { return sum_sq(subsample_st(x, 2, 3, 3)); });
  probe("rot180", {3, 2, 3, 3}, [&](const T& w) { return sum_sq(mul(rot180_swap(w), rot180_swap(w))); });
  probe("concat_slice", {2, 3, 4, 4}, [&](const T& x) {
    auto o = randn({2, 2, 4, 4}, 1016);
    return sum_sq(slice_ch(concat_ch<double>({x, o}), 1, 4));
  });
  probe("pad_ch", {2, 2, 3, 3}, [&](const T& x) { return sum_sq(pad_ch(x, 5, 2)); });
  probe("group_norm", {2, 6, 3, 3}, [&](const T& x) {
    auto gamma = randn({6}, 1017);
    auto beta = randn({6}, 1018);
    return sum_sq(group_norm(x, gamma, beta, 3));
  });
  probe("gn_params", {6}, [&](const T& gamma) {
    auto x = randn({2, 6, 3, 3}, 1019);
    auto beta = randn({6}, 1020);
    return sum_sq(group_norm(x, gamma, beta, 2));
  });
  {
    // fused kernels match the composite reference
    auto x = randn({2, 8, 3, 3}, 1027);
    auto gamma = randn({8}, 1028);
    auto beta = randn({8}, 1029);
    CHECK(rel_diff(group_norm(x, gamma, beta, 4), group_norm_ref(x, gamma, beta, 4)) < 1e-12);
    CHECK(rel_diff(silu(x), silu_ref(x)) < 1e-12);
  }
  probe("softmax", {2, 3, 5}, [&](const T& x) {
    auto v = randn({2, 3, 5}, 1021);
    return sum_all(mul(softmax_lastdim(x), v));
  });
  probe("bias_nchw", {4}, [&](const T& b) {
    auto x = randn({2, 4, 3, 3}, 1022);
    return sum_sq(add_bias_nchw(x, b));
  });
  probe("mul_channel", {4}, [&](const T& v) {
    auto x = randn({2, 4, 3, 3}, 1023);
    return sum_sq(mul_channel(x, v));
  });
  probe("rowvec", {5}, [&](const T& b) {
    auto x = randn({3, 5}, 1024);
    return sum_sq(add_rowvec(x, b));
  });
  probe("spatial_bcast", {2, 3}, [&](const T& e) { return sum_sq(spatial_bcast(e, 4, 4)); });
  probe("spatial_sum", {2, 3, 4, 4}, [&](const T& x) { return sum_sq(spatial_sum(x)); });
  probe("mul_per_sample", {3}, [&](const T& v) {
    auto x = randn({3, 2, 2, 2}, 1025);
    return sum_sq(mul_per_sample(x, v));
  });
  probe("sample_dot", {3, 4}, [&](const T& x) {
    auto o = randn({3, 4}, 1026);
    return sum_sq(sample_dot(x, o));
  });
  probe("embed", {4, 6}, [&](const T& table) {
    std::vector<int64_t> ids{2, 0, 2, 3};
    return sum_sq(embed_rows(table, ids));
  });
  probe("flip_shift", {1, 2, 4, 4}, [&](const T& x) {
    return sum_sq(shift2d(flip_w(x), 1, -2));
  });
  probe("mean_all", {2, 7}, [&](const T& x) { return mean_all(mul(x, x)); });
  tape.clear();
}

TEST_CASE("grad_check API cases") {
  auto point = randn({3, 3}, 21);
  double e1 = grad_check<double>([](const T& x) { return sum_all(x); }, point);
  CHECK(e1 < 1e-9);  // both sides 1 up to summation rounding
  double e2 = grad_check<double>([](const T& x) { return sum_all(silu(x)); }, point);
  CHECK(e2 < 1e-4);
}

TEST_CASE("second derivatives through the recorded backward") {
  // phi(x) = |d/dx sum(silu(W x))|^2 exercises create_graph end to end.
  auto W = randn({4, 4}, 31);
  auto phi = [&](const T& x) {
    Tensor<double> xx = x;
    auto inner = sum_all(silu_ref(matmul(xx, W)));
    auto gx = Tape<double>::active().grad(inner, {xx}, /*create_graph=*/true)[0];
    return sum_sq(gx);
  };
  auto point = randn({2, 4}, 32);
  double err = grad_check<double>(phi, point);
  CHECK(err < 1e-4);

  // gradient-norm penalty differentiated w.r.t. conv weights, through a
  // conv + leaky stack (the mask is constant under the second derivative)
  auto xc = randn({1, 2, 4, 4}, 33);
  auto phi2 = [&](const T& w) {
    Tensor<double> xx = xc.detach().set_requires_grad(true);
    auto inner = sum_all(leaky_relu(conv2d(xx, w, 1, 1)));
    auto gx = Tape<double>::active().grad(inner, {xx}, true)[0];
    return sum_sq(gx);
  };
  auto w2 = randn({2, 2, 3, 3}, 34);
  CHECK(grad_check<double>(phi2, w2) < 1e-4);
  Tape<double>::active().clear();
}

TEST_CASE("adam examples") {
  // zero grad -> params unchanged
  auto p = T::from({1.5, -2.0}, {2}, true);
  auto orig = p.values();
  std::vector<T> params{p};
  AdamState<double> st(1e-3, 0.0, 0.99);
  p.grad_buf();  // allocated, all zero
  adam_step(params, st);
  CHECK(p.values() == orig);
  CHECK(st.step == 1);

  // beta1=0 first step: direction -sign(g), magnitude ~ lr
  auto q = T::from({0.0}, {1}, true);
  std::vector<T> qs{q};
  AdamState<double> st2(1e-3, 0.0, 0.99);
  q.grad_buf()[0] = 0.37;
  adam_step(qs, st2);
  CHECK(q.data()[0] == doctest::Approx(-1e-3).epsilon(1e-4));
  CHECK(st2.step == 1);

  auto r = T::from({0.0}, {1}, true);
  std::vector<T> rs{r};
  AdamState<double> st3(1e-3, 0.0, 0.99);
  r.grad_buf()[0] = -123.0;
  adam_step(rs, st3);
  CHECK(r.data()[0] == doctest::Approx(1e-3).epsilon(1e-4));

  // hand-evaluated second step, beta1=0, beta2=0.99, g constant = 1
  auto s = T::from({0.0}, {1}, true);
  std::vector<T> ss{s};
  AdamState<double> st4(1e-2, 0.0, 0.99);
  s.grad_buf()[0] = 1.0;
  adam_step(ss, st4);
  double w1 = -1e-2 * 1.0 / (std::sqrt(0.01 / (1 - 0.99)) + 1e-8);
  CHECK(s.data()[0] == doctest::Approx(w1).epsilon(1e-9));
  s.zero_grad();
  s.grad_buf()[0] = 1.0;
  adam_step(ss, st4);
  double v2 = 0.99 * 0.01 + 0.01;  // v after two steps
  double w2 = w1 - 1e-2 * 1.0 / (std::sqrt(v2 / (1 - 0.99 * 0.99)) + 1e-8);
  CHECK(s.data()[0] == doctest::Approx(w2).epsilon(1e-9));

  CHECK_THROWS_AS([&] {
    auto t = T::from({0.0}, {1}, true);
    std::vector<T> ts{t};
    AdamState<double> st5;
    t.grad_buf()[0] = std::numeric_limits<double>::quiet_NaN();
    adam_step(ts, st5);
  }(), NumericError);
}

TEST_CASE("adam determinism: identical runs bitwise") {
  auto run = [&]() {
    Tape<float>& tape = Tape<float>::active();
    tape.clear();
    RngState rng(77);
    auto w = Tf::normal(rng, {8, 8}, true);
    auto x = Tf::normal(rng, {4, 8});
    std::vector<Tf> params{w};
    AdamState<float> st(1e-3, 0.0, 0.99);
    for (int i = 0; i < 5; ++i) {
      tape.clear();
      auto loss = mse(silu(matmul(x, w)), zeros_like(x));
      tape.backward(loss);
      adam_step(params, st);
      w.zero_grad();
    }
    tape.clear();
    return w.values();
  };
  auto a = run();
  auto b = run();
  CHECK(std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0);
}

TEST_CASE("non-finite values are surfaced") {
  bool prev = debug_finite_checks();
  debug_finite_checks() = true;
  auto x = T::from({1e308, 1e308}, {2});
  CHECK_THROWS_AS((void)mul(x, x), NumericError);
  debug_finite_checks() = prev;
}

TEST_CASE("shape errors") {
  auto a = randn({2, 3}, 1);
  auto b = randn({3, 2}, 2);
  CHECK_THROWS_AS((void)add(a, b), ShapeError);
  CHECK_THROWS_AS((void)matmul(a, a), ShapeError);
  CHECK_THROWS_AS((void)group_norm(randn({1, 6, 2, 2}, 3), randn({6}, 4), randn({6}, 5), 4),
                  ShapeError);
  CHECK_THROWS_AS((void)Tensor<double>::zeros({0, 2}), ShapeError);
}
