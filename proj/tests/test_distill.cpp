#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <d2o/distill.hpp>
#include <d2o/grad_check.hpp>

using namespace d2o;
using T = Tensor<double>;

TEST_CASE("triple sampling follows the method tables") {
  Schedule sched;
  RngState rng(1);
  bool saw_i1 = false;
  for (int k = 0; k < 400; ++k) {
    TimeTriple tr = sample_triple(DistillMethod::CD, sched, rng);
    CHECK(tr.s == sched.t(0));
    CHECK(tr.s == doctest::Approx(0.002));
    CHECK(tr.t >= tr.u);
    CHECK(tr.u >= tr.s);
    if (tr.t == sched.t(1)) {
      // i = 1 row: u = s = sigma_min
      CHECK(tr.u == sched.t(0));
      saw_i1 = true;
    }
  }
  CHECK(saw_i1);

  for (int k = 0; k < 400; ++k) {
    TimeTriple tr = sample_triple(DistillMethod::PD, sched, rng);
    CHECK(tr.t > tr.s);
    CHECK(tr.t >= tr.u);
    CHECK(tr.u >= tr.s);
  }

  // PD midpoint: i=4, j=0 -> u = T(2,N); verified through the index math
  CHECK((4 + 0 + 1) / 2 == 2);
  CHECK((3 + 0 + 1) / 2 == 2);  // fractional 1.5 rounds up
}

TEST_CASE("student head boundary and s=0 limit") {
  DenoiseFn<double> den = [](const T& x, const std::vector<double>&) {
    return add_scalar(mul_scalar(x, 0.5), 0.3);
  };
  RngState rng(2);
  auto x = T::normal(rng, {3, 1, 4, 4});

  auto same = student_head(den, x, {2.5}, {2.5});
  CHECK(same.values() == x.values());

  auto limit = student_head(den, x, {2.5}, {0.0});
  auto direct = den(x, {2.5});
  for (int64_t i = 0; i < x.numel(); ++i)
    CHECK(limit.data()[i] == doctest::Approx(direct.data()[i]));
}

TEST_CASE("cd teacher: degenerate step, stop-gradient, exact endpoint") {
  // constant denoiser: solvers are exact, flow x(s) = b + (x-b) s/t
  double b = 0.4;
  DenoiseFn<double> score = [&](const T& x, const std::vector<double>&) {
    return Tensor<double>::full(x.shape(), b);
  };
  DenoiseFn<double> student = score;
  RngState rng(3);
  auto x_t = T::normal(rng, {2, 1, 4, 4});

  // u = t: teacher is the student head applied to x_t directly
  auto h_deg = cd_teacher(score, student, x_t, {2.0}, {2.0}, {0.5});
  auto expect = student_head(student, x_t, {2.0}, {0.5});
  CHECK(h_deg.values() == expect.values());

  // exact ODE endpoint for the constant denoiser
  double t = 2.0, u = 1.0, s = 0.25;
  auto h = cd_teacher(score, student, x_t, {t}, {u}, {s});
  for (int64_t i = 0; i < x_t.numel(); ++i) {
    double endpoint = b + (x_t.data()[i] - b) * (s / t);
    CHECK(h.data()[i] == doctest::Approx(endpoint).epsilon(1e-12));
  }

  // teacher output is constant w.r.t. the tape
  CHECK_FALSE(h.requires_grad());
  CHECK(h.is_leaf());
}

TEST_CASE("cd loss properties") {
  Schedule sched;
  RngState rng(5);
  auto x0 = T::normal(rng, {4, 1, 4, 4});

  // identity student (c_skip boundary behavior) with identity score:
  // student == teacher mapping along the whole trajectory -> zero loss.
  DenoiseFn<double> ident = [](const T& x, const std::vector<double>&) { return x; };
  RngState r1(6);
  auto zero = cd_loss(ident, ident, sched, x0, r1);
  CHECK(zero.item() == doctest::Approx(0.0));

  // generic mismatched pair -> strictly positive
  DenoiseFn<double> other = [](const T& x, const std::vector<double>&) {
    return mul_scalar(x, 0.2);
  };
  RngState r2(7);
  CHECK(cd_loss(other, ident, sched, x0, r2).item() > 0.0);
}

TEST_CASE("cd loss through a real model: gradients match finite differences") {
  Schedule sched;
  Precond pc;
  UNetConfig cfg;
  cfg.img_size = 8;
  cfg.base_width = 8;
  cfg.temb_dim = 16;
  RngState mr(8);
  UNetModel<double> student_net(cfg, mr);
  RngState sr(9);
  UNetModel<double> score_net(cfg, sr);
  for (auto& p : student_net.params())
    for (int64_t i = 0; i < p.t.numel(); ++i) p.t.data()[i] += 0.03 * std::sin(double(i + 1));
  for (auto& p : score_net.params())
    for (int64_t i = 0; i < p.t.numel(); ++i) p.t.data()[i] += 0.03 * std::cos(double(i + 2));
  for (auto& p : score_net.params()) p.t.set_requires_grad(false);

  auto student = untraced(make_denoiser(student_net, pc));
  auto score = untraced(make_denoiser(score_net, pc));
  RngState dr(10);
  auto x0 = T::normal(dr, {2, 1, 8, 8});

  // freeze the randomness so the loss is a deterministic function of theta
  auto loss_fn = [&]() {
    RngState r(77);
    return cd_loss(student, score, sched, x0, r);
  };

  // gradient of the training objective treats the teacher branch as fixed;
  // that is exactly what the stop-gradient inside cd_loss implements, and
  // what finite differences see as long as the teacher recomputes with the
  // same perturbed parameters... it does not: fd must hold the teacher
  // fixed. Build the fd-consistent scalar with a frozen teacher instead.
  RngState rt(77);
  std::vector<double> t(2), u(2), s(2);
  for (int b = 0; b < 2; ++b) {
    TimeTriple tr = sample_triple(DistillMethod::CD, sched, rt);
    t[b] = tr.t;
    u[b] = tr.u;
    s[b] = tr.s;
  }
  auto x_t = perturb(x0, t, rt);
  auto target = cd_teacher(score, student, x_t, t, u, s);
  auto fixed_target_loss = [&]() { return mse(student_head(student, x_t, t, s), target); };

  double worst = 0;
  int checked = 0;
  for (auto& p : student_net.params()) {
    worst = std::max(worst, grad_check_param<double>(fixed_target_loss, p.t, 3,
                                                     fnv1a64(p.name.data(), p.name.size())));
    ++checked;
  }
  CHECK(checked > 20);
  CHECK(worst < 1e-3);

  // full cd_loss: gradients flow only through the direct student branch
  Tape<double>& tape = Tape<double>::active();
  tape.clear();
  auto loss = loss_fn();
  tape.backward(loss);
  for (const auto& p : score_net.params()) CHECK_FALSE(p.t.has_grad());
  bool any = false;
  for (const auto& p : student_net.params()) any = any || p.t.has_grad();
  CHECK(any);
  tape.clear();
}

TEST_CASE("pd loss") {
  RngState rng(11);
  auto x_t = T::normal(rng, {2, 1, 4, 4});
  TimeTriple tr{2.0, 1.5, 1.0};

  // teacher returning its input -> target = x_t, loss = |f - x_t|^2
  DenoiseFn<double> student = [](const T& x, const std::vector<double>&) {
    return mul_scalar(x, 0.9);
  };
  auto l = pd_loss(student, x_t, x_t, tr);
  auto expect = mse(mul_scalar(x_t, 0.9), x_t);
  CHECK(l.item() == doctest::Approx(expect.item()));

  // exact student: f equals the slope target -> zero
  auto teacher_out = mul_scalar(x_t, 0.8);
  double slope = tr.t / (tr.t - tr.s);
  DenoiseFn<double> exact = [&](const T& x, const std::vector<double>&) {
    NoGradGuard ng;
    return add(mul_scalar(sub(mul_scalar(x, 0.8), x), slope), x);
  };
  CHECK(pd_loss(exact, x_t, teacher_out, tr).item() == doctest::Approx(0.0));

  // scalar case: x_t=1, H=0.4, t=2, s=1 -> target = 2(0.4-1)+1 = -0.2
  auto one = T::full({1, 1, 1, 1}, 1.0);
  auto h = T::full({1, 1, 1, 1}, 0.4);
  DenoiseFn<double> zero_student = [](const T& x, const std::vector<double>&) {
    return zeros_like(x);
  };
  TimeTriple tr2{2.0, 1.5, 1.0};
  auto l2 = pd_loss(zero_student, one, h, tr2);
  CHECK(l2.item() == doctest::Approx(0.04));  // (0 - (-0.2))^2

  CHECK_THROWS_AS((void)pd_loss(student, x_t, x_t, TimeTriple{1.0, 1.0, 1.0}), ShapeError);

  // pd teacher: two solver applications
  int evals = 0;
  DenoiseFn<double> counting = [&](const T& x, const std::vector<double>&) {
    ++evals;
    return mul_scalar(x, 0.5);
  };
  (void)pd_teacher(counting, x_t, {2.0}, {1.5}, {1.0});
  CHECK(evals == 2);
}

TEST_CASE("k-step generator") {
  Schedule sched;
  Precond pc;
  UNetConfig cfg;
  cfg.img_size = 8;
  cfg.base_width = 8;
  cfg.temb_dim = 16;
  RngState mr(21);
  UNetModel<double> net(cfg, mr);
  for (auto& p : net.params())
    for (int64_t i = 0; i < p.t.numel(); ++i) p.t.data()[i] += 0.02 * std::sin(double(3 * i + 1));
  auto den3 = make_denoiser(net, pc);
  auto den = untraced(den3);

  RngState zr(22);
  auto z = mul_scalar(T::normal(zr, {2, 1, 8, 8}), sched.sigma_max);

  // k = 1 is exactly one-step generation
  KStepGenerator<double> g1{den, sched, 1};
  net.reset_forward_calls();
  auto img1 = g1(z);
  CHECK(net.forward_calls() == 1);
  auto one_step = sample_from(den3, sched, 1, z, Solver::Euler);
  CHECK(img1.values() == one_step.image.values());

  // nesting count equals k
  KStepGenerator<double> g4{den, sched, 4};
  net.reset_forward_calls();
  (void)g4(z);
  CHECK(net.forward_calls() == 4);

  // two-step with an intermediate-sigma override
  KStepGenerator<double> g2{den, sched, 2, 5.0};
  auto ts = g2.times();
  REQUIRE(ts.size() == 3);
  CHECK(ts[0] == doctest::Approx(sched.sigma_max));
  CHECK(ts[1] == doctest::Approx(5.0));
  CHECK(ts[2] == 0.0);
}

TEST_CASE("combined loss") {
  Schedule sched;
  Precond pc;
  UNetConfig cfg;
  cfg.img_size = 8;
  cfg.base_width = 8;
  cfg.temb_dim = 16;
  RngState mr(31);
  UNetModel<double> student_net(cfg, mr);
  RngState sr(32);
  UNetModel<double> score_net(cfg, sr);
  auto student = untraced(make_denoiser(student_net, pc));
  auto score = untraced(make_denoiser(score_net, pc));
  RngState dr(33);
  auto x0 = T::normal(dr, {2, 1, 8, 8});
  auto gan_loss = T::scalar(0.75);

  // lambda = 0: bitwise the GAN loss, score model never evaluated
  score_net.reset_forward_calls();
  RngState r0(1);
  auto l0 = combined_generator_loss(gan_loss, student, score, sched, x0, r0, 0.0);
  CHECK(l0.values() == gan_loss.values());
  CHECK(score_net.forward_calls() == 0);

  // lambda = 1: sum of separately computed parts
  RngState r1(2), r2(2);
  auto lc = combined_generator_loss(gan_loss, student, score, sched, x0, r1, 1.0);
  auto cd = cd_loss(student, score, sched, x0, r2);
  CHECK(lc.item() == doctest::Approx(gan_loss.item() + cd.item()));

  // monotone in lambda for fixed randomness
  RngState r3(2), r4(2);
  auto l_small = combined_generator_loss(gan_loss, student, score, sched, x0, r3, 0.5);
  auto l_big = combined_generator_loss(gan_loss, student, score, sched, x0, r4, 2.0);
  CHECK(l_big.item() >= l_small.item());

  CHECK_THROWS_AS(
      (void)combined_generator_loss(gan_loss, student, score, sched, x0, r0, -1.0), ShapeError);
}
