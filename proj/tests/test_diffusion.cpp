#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <d2o/diffusion.hpp>

using namespace d2o;
using T = Tensor<double>;

namespace {

DenoiseFn<double> const_denoiser(double v) {
  return [v](const T& x, const std::vector<double>&) { return Tensor<double>::full(x.shape(), v); };
}

TracedDenoiseFn<double> traced(const DenoiseFn<double>& f) {
  return [f](const T& x, const std::vector<double>& s, BlockTapTrace<double>*) { return f(x, s); };
}

}  // namespace

TEST_CASE("scheduler endpoints and monotonicity") {
  Schedule sched;
  CHECK(std::abs(sched.t(0) - 0.002) / 0.002 < 1e-9);
  CHECK(std::abs(sched.t(18) - 80.0) / 80.0 < 1e-9);
  for (int i = 0; i < 18; ++i) CHECK(sched.t(i) < sched.t(i + 1));

  // closed form evaluated in extended precision
  long double a = powl(80.0L, 1.0L / 7.0L), b = powl(0.002L, 1.0L / 7.0L);
  long double mid = powl(a + (1.0L - 9.0L / 18.0L) * (b - a), 7.0L);
  CHECK(std::abs(sched.t(9) - static_cast<double>(mid)) / static_cast<double>(mid) < 1e-12);

  CHECK_THROWS_AS(sched.t(-1), ShapeError);
  CHECK_THROWS_AS(sched.t(19), ShapeError);
}

TEST_CASE("preconditioner coefficients") {
  Precond pc;
  CHECK(pc.c_skip(pc.eps) == 1.0);
  CHECK(pc.c_out(pc.eps) == 0.0);

  // at sigma_max the skip path is effectively gone
  CHECK(pc.c_skip(80.0) == doctest::Approx(3.9063e-5).epsilon(1e-3));

  double prev = 1.0;
  for (double t : {0.01, 0.1, 1.0, 10.0, 80.0}) {
    CHECK(pc.c_skip(t) < prev);
    prev = pc.c_skip(t);
  }
  // c_skip(t) * ((t-eps)^2 + sd^2) == sd^2
  for (double t : {0.002, 0.02, 0.31, 2.7, 45.0, 80.0}) {
    double lhs = pc.c_skip(t) * ((t - pc.eps) * (t - pc.eps) + pc.sigma_data * pc.sigma_data);
    CHECK(std::abs(lhs - pc.sigma_data * pc.sigma_data) < 1e-6);
  }
}

TEST_CASE("denoise boundary and zero-network behavior") {
  UNetConfig cfg;
  cfg.img_size = 8;
  cfg.base_width = 8;
  cfg.temb_dim = 16;
  RngState rng(5);
  UNetModel<double> net(cfg, rng);
  Precond pc;
  RngState xr(6);
  auto x = T::normal(xr, {2, 1, 8, 8});

  // identity at the boundary regardless of the network
  auto y = denoise(net, pc, x, {pc.eps});
  CHECK(y.values() == x.values());

  // final conv is zero-initialized: raw output 0, denoise = c_skip * x
  double t = 1.7;
  auto y2 = denoise(net, pc, x, {t});
  for (int64_t i = 0; i < x.numel(); ++i)
    CHECK(y2.data()[i] == doctest::Approx(pc.c_skip(t) * x.data()[i]));

  CHECK_THROWS_AS((void)denoise(net, pc, x, {0.001}), ShapeError);
}

TEST_CASE("perturb statistics and determinism") {
  RngState rng(9);
  auto x0 = T::normal(rng, {4, 1, 5, 5});

  RngState r1(3);
  auto same = perturb(x0, 0.0, r1);
  CHECK(same.values() == x0.values());

  RngState r2(4), r3(4);
  auto a = perturb(x0, 2.5, r2);
  auto b = perturb(x0, 2.5, r3);
  CHECK(a.values() == b.values());

  RngState r4(5);
  auto big = Tensor<double>::zeros({100, 1, 32, 32});
  auto noised = perturb(big, 80.0, r4);
  double mean = 0, var = 0;
  int64_t n = noised.numel();
  for (int64_t i = 0; i < n; ++i) mean += noised.data()[i];
  mean /= static_cast<double>(n);
  for (int64_t i = 0; i < n; ++i)
    var += (noised.data()[i] - mean) * (noised.data()[i] - mean);
  var /= static_cast<double>(n - 1);
  CHECK(std::abs(var - 6400.0) / 6400.0 < 0.02);
}

TEST_CASE("euler step identities") {
  RngState rng(11);
  auto x = T::normal(rng, {3, 1, 4, 4});

  auto g02 = const_denoiser(0.2);
  auto same = euler_step(g02, x, {2.0}, {2.0});
  CHECK(same.values() == x.values());

  auto limit = euler_step(g02, x, {2.0}, {0.0});
  for (int64_t i = 0; i < x.numel(); ++i) CHECK(limit.data()[i] == doctest::Approx(0.2));

  // scalar case: x=1, g=0.2, t=2, s=1 -> 0.6
  auto one = T::full({1, 1, 1, 1}, 1.0);
  auto r = euler_step(g02, one, {2.0}, {1.0});
  CHECK(r.item() == doctest::Approx(0.6));

  CHECK_THROWS_AS((void)euler_step(g02, x, {0.0}, {0.0}), ShapeError);
}

TEST_CASE("heun step identities") {
  RngState rng(12);
  auto x = T::normal(rng, {2, 1, 4, 4});

  // zero denoiser: both solvers give x * s/t
  auto zden = const_denoiser(0.0);
  double t = 3.0, s = 1.2;
  auto he = heun_step(zden, x, {t}, {s});
  auto eu = euler_step(zden, x, {t}, {s});
  for (int64_t i = 0; i < x.numel(); ++i) {
    CHECK(he.data()[i] == doctest::Approx(x.data()[i] * s / t));
    CHECK(eu.data()[i] == doctest::Approx(x.data()[i] * s / t));
  }

  // identity denoiser: d = 0, x returned
  DenoiseFn<double> iden = [](const T& v, const std::vector<double>&) { return v; };
  auto fixed = heun_step(iden, x, {t}, {s});
  for (int64_t i = 0; i < x.numel(); ++i)
    CHECK(fixed.data()[i] == doctest::Approx(x.data()[i]));

  // s=0: single evaluation, equal to the euler limit
  int evals = 0;
  DenoiseFn<double> counting = [&](const T& v, const std::vector<double>&) {
    ++evals;
    return Tensor<double>::full(v.shape(), 0.2);
  };
  auto h0 = heun_step(counting, x, {t}, {0.0});
  CHECK(evals == 1);
  auto e0 = euler_step(counting, x, {t}, {0.0});
  CHECK(h0.values() == e0.values());
}

TEST_CASE("solver convergence orders on an affine denoiser") {
  // den(x) = a x + b makes the sampling ODE linear with exact solution
  // x(s) = (x0 - b/c) (s/t0)^c + b/c, c = 1 - a.
  double a = 0.3, b = 0.7, c = 1.0 - a;
  DenoiseFn<double> den = [&](const T& x, const std::vector<double>&) {
    return add_scalar(mul_scalar(x, a), b);
  };
  double t0 = 10.0, s_end = 1.0, x0 = 2.0;
  double exact = (x0 - b / c) * std::pow(s_end / t0, c) + b / c;

  auto integrate = [&](Solver solver, int n) {
    auto x = T::full({1}, x0);
    for (int k = 0; k < n; ++k) {
      double tk = t0 + (s_end - t0) * k / n;
      double sk = t0 + (s_end - t0) * (k + 1) / n;
      x = solver == Solver::Euler ? euler_step(den, x, {tk}, {sk})
                                  : heun_step(den, x, {tk}, {sk});
    }
    return std::abs(x.item() - exact);
  };

  double e1 = integrate(Solver::Euler, 20), e2 = integrate(Solver::Euler, 40);
  double order_euler = std::log2(e1 / e2);
  CHECK(order_euler == doctest::Approx(1.0).epsilon(0.3));

  double h1 = integrate(Solver::Heun, 20), h2 = integrate(Solver::Heun, 40);
  double order_heun = std::log2(h1 / h2);
  CHECK(order_heun == doctest::Approx(2.0).epsilon(0.3));
}

TEST_CASE("edm loss basics") {
  Precond pc;
  Schedule sched;
  RngState rng(21);
  auto x0 = T::normal(rng, {4, 1, 8, 8});

  // a perfect model gives zero loss
  DenoiseFn<double> perfect = [&](const T&, const std::vector<double>&) { return x0; };
  RngState r1(1);
  CHECK(edm_loss(perfect, pc, sched, x0, r1).item() == doctest::Approx(0.0));

  DenoiseFn<double> zero = const_denoiser(0.0);
  RngState r2(2);
  CHECK(edm_loss(zero, pc, sched, x0, r2).item() >= 0.0);
}

TEST_CASE("edm training reduces the loss on synthetic data") {
  using S = float;
  SynthSpec spec;
  auto data = make_dataset(spec, 2000, 1);
  UNetConfig cfg;
  cfg.base_width = 16;
  cfg.temb_dim = 32;
  RngState rng(3);
  UNetModel<S> net(cfg, rng);
  Precond pc;
  Schedule sched;
  auto params = net.trainable();
  AdamState<S> opt(2e-3, 0.9, 0.999);
  Tape<S>& tape = Tape<S>::active();
  RngState data_rng(4), noise_rng(5);
  auto den = untraced(make_denoiser(net, pc));

  double first = 0, last = 0;
  const int steps = 300, batch = 16;
  for (int step = 0; step < steps; ++step) {
    tape.clear();
    net.zero_grad();
    auto x0 = data.batch<S>(data.draw_indices(data_rng, batch));
    auto loss = edm_loss(den, pc, sched, x0, noise_rng);
    tape.backward(loss);
    adam_step(params, opt);
    double lv = static_cast<double>(loss.item());
    CHECK(std::isfinite(lv));
    CHECK(lv >= 0.0);
    if (step < 30) first += lv;
    if (step >= steps - 30) last += lv;
  }
  tape.clear();
  CHECK(last < first * 0.7);
}

TEST_CASE("sampler contract") {
  UNetConfig cfg;
  cfg.img_size = 8;
  cfg.base_width = 8;
  cfg.temb_dim = 16;
  RngState rng(31);
  UNetModel<double> net(cfg, rng);
  // give the zero-initialized tail some signal
  for (auto& p : net.params())
    for (int64_t i = 0; i < p.t.numel(); ++i) p.t.data()[i] += 0.01 * std::sin(double(i + 1));
  Precond pc;
  Schedule sched;
  auto den = make_denoiser(net, pc);

  // one-step output equals the denoiser estimate at sigma_max
  RngState z1(7);
  auto z = mul_scalar(T::normal(z1, {2, 1, 8, 8}), sched.sigma_max);
  auto one = sample_from(den, sched, 1, z, Solver::Euler);
  auto direct = denoise(net, pc, z, {sched.sigma_max});
  CHECK(one.image.values() == direct.values());
  CHECK(one.trajectory.size() == 1);
  CHECK(one.trajectory[0].input.values() == z.values());
  CHECK(one.trajectory[0].den_out.values() == direct.values());

  // trajectory length and determinism across solvers
  for (auto solver : {Solver::Euler, Solver::Heun}) {
    RngState ra(9), rb(9);
    auto A = sample<double>(den, sched, 6, ra, solver, {1, 1, 8, 8});
    auto B = sample<double>(den, sched, 6, rb, solver, {1, 1, 8, 8});
    CHECK(A.trajectory.size() == 6);
    CHECK(A.image.values() == B.image.values());
  }

  // taps captured at every step when requested
  RngState rt(10);
  auto traced_run = sample<double>(den, sched, 3, rt, Solver::Euler, {1, 1, 8, 8}, true);
  for (const auto& st : traced_run.trajectory)
    CHECK(st.taps.size() == static_cast<size_t>(cfg.block_count()));
}
