#pragma once

#include "d2o/diffusion.hpp"

namespace d2o {

// Start/intermediate/end sigmas of one distillation draw, t >= u >= s.
struct TimeTriple {
  double t = 0, u = 0, s = 0;
};

enum class DistillMethod { PD, CD };

// CD: t = T(i,N) with i uniform in 1..N, u = T(i-1,N), s = T(0,N).
// PD: t = T(i,N) with 2 <= i <= N, s = T(j,N) with 0 <= j < i-1,
//     u = T(round((i+j)/2), N), rounding half up.
inline TimeTriple sample_triple(DistillMethod method, const Schedule& sched, RngState& rng) {
  require(sched.steps >= 2, "sample_triple: need at least two schedule steps");
  TimeTriple tr;
  if (method == DistillMethod::CD) {
    int64_t i = 1 + rng.next_below(sched.steps);
    tr.t = sched.t(i);
    tr.u = sched.t(i - 1);
    tr.s = sched.t(0);
  } else {
    int64_t i = 2 + rng.next_below(sched.steps - 1);
    int64_t j = rng.next_below(i - 1);
    tr.t = sched.t(i);
    tr.u = sched.t((i + j + 1) / 2);
    tr.s = sched.t(j);
  }
  return tr;
}

// Student head: F(x, t, s) = ((t-s)/t) (f(x,t) - x) + x, so F(x, t, t) = x.
// s = 0 collapses to the plain denoiser estimate.
template <typename S>
Tensor<S> student_head(const DenoiseFn<S>& den, const Tensor<S>& x, std::vector<double> t,
                       std::vector<double> s) {
  int64_t B = x.dim(0);
  auto tv = detail::per_sample(t, B), sv = detail::per_sample(s, B);
  std::vector<double> c(static_cast<size_t>(B));
  bool all_zero = true;
  for (int64_t b = 0; b < B; ++b) {
    size_t i = static_cast<size_t>(b);
    require(tv[i] > 0 && sv[i] >= 0 && sv[i] <= tv[i], "student_head: need 0 <= s <= t");
    c[i] = (tv[i] - sv[i]) / tv[i];
    all_zero = all_zero && sv[i] == 0.0;
  }
  Tensor<S> f = den(x, tv);
  if (all_zero) return f;  // analytic limit, identical to plain denoising
  return add(x, mul_per_sample(sub(f, x), detail::coeff<S>(c)));
}

// CD teacher: one frozen-score solver step from t to u (Heun), then the
// stop-gradient student head from u down to s. Returns a constant tensor.
template <typename S>
Tensor<S> cd_teacher(const DenoiseFn<S>& score, const DenoiseFn<S>& student_sg,
                     const Tensor<S>& x_t, const std::vector<double>& t,
                     const std::vector<double>& u, const std::vector<double>& s) {
  NoGradGuard ng;
  int64_t B = x_t.dim(0);
  auto tv = detail::per_sample(t, B), uv = detail::per_sample(u, B);
  bool degenerate = true;
  for (int64_t b = 0; b < B; ++b)
    degenerate = degenerate && uv[static_cast<size_t>(b)] == tv[static_cast<size_t>(b)];
  Tensor<S> x_u = degenerate ? x_t : heun_step(score, x_t, tv, uv);
  return student_head(student_sg, x_u, uv, detail::per_sample(s, B));
}

// Mean squared error between the student head and the CD teacher over a
// clean batch, with per-sample triples.
template <typename S>
Tensor<S> cd_loss(const DenoiseFn<S>& student, const DenoiseFn<S>& score, const Schedule& sched,
                  const Tensor<S>& x0, RngState& rng) {
  require(x0.dim(0) >= 1, "cd_loss: empty batch");
  int64_t B = x0.dim(0);
  std::vector<double> t(static_cast<size_t>(B)), u(static_cast<size_t>(B)),
      s(static_cast<size_t>(B));
  for (int64_t b = 0; b < B; ++b) {
    TimeTriple tr = sample_triple(DistillMethod::CD, sched, rng);
    t[static_cast<size_t>(b)] = tr.t;
    u[static_cast<size_t>(b)] = tr.u;
    s[static_cast<size_t>(b)] = tr.s;
  }
  Tensor<S> x_t = perturb(x0, t, rng);
  Tensor<S> target = cd_teacher(score, student, x_t, t, u, s);
  Tensor<S> pred = student_head(student, x_t, t, s);
  Tensor<S> loss = mse(pred, target);
  if (!std::isfinite(static_cast<double>(loss.item())))
    throw NumericError("cd_loss: non-finite loss");
  return loss;
}

// PD target: the t->s slope of the two-step teacher output, projected back
// through x_t. Teacher is two solver applications (frozen score at the top
// distillation stage, stop-gradient student otherwise).
template <typename S>
Tensor<S> pd_teacher(const DenoiseFn<S>& solver_model, const Tensor<S>& x_t,
                     const std::vector<double>& t, const std::vector<double>& u,
                     const std::vector<double>& s) {
  NoGradGuard ng;
  Tensor<S> x_u = euler_step(solver_model, x_t, t, u);
  return euler_step(solver_model, x_u, u, s);
}

template <typename S>
Tensor<S> pd_loss(const DenoiseFn<S>& student, const Tensor<S>& x_t, const Tensor<S>& teacher_out,
                  const TimeTriple& triple) {
  require(triple.t > triple.s, "pd_loss: need t > s");
  double slope = triple.t / (triple.t - triple.s);
  Tensor<S> target;
  {
    NoGradGuard ng;
    target = add(mul_scalar(sub(teacher_out, x_t), slope), x_t);
  }
  Tensor<S> pred = student(x_t, {triple.t});
  return mse(pred, target);
}

// k-step generator built from nested student-head applications down the
// k-sub-schedule; the last application takes the s->0 limit, so k=1 equals
// plain one-step generation. sigma_mid, when given, overrides T(1,2) for
// the two-step sweep protocol.
template <typename S>
struct KStepGenerator {
  DenoiseFn<S> den;
  Schedule sched;
  int64_t k = 1;
  double sigma_mid = -1;  // <0: use the sub-schedule

  std::vector<double> times() const {
    std::vector<double> ts;
    for (int64_t j = k; j >= 1; --j) ts.push_back(sched.t(j, k));
    if (sigma_mid > 0) {
      require(k == 2, "sigma_mid override is a two-step protocol");
      ts[1] = sigma_mid;
    }
    ts.push_back(0.0);
    return ts;
  }

  // differentiable in the model parameters (used as a GAN generator)
  Tensor<S> operator()(const Tensor<S>& z) const {
    auto ts = times();
    Tensor<S> x = z;
    for (size_t i = 0; i + 1 < ts.size(); ++i) x = student_head(den, x, {ts[i]}, {ts[i + 1]});
    return x;
  }
};

// GAN generator objective plus an optional weighted CD term; lambda_cd = 0
// never touches the score model.
template <typename S>
Tensor<S> combined_generator_loss(const Tensor<S>& gan_g_loss, const DenoiseFn<S>& student,
                                  const DenoiseFn<S>& score, const Schedule& sched,
                                  const Tensor<S>& x0, RngState& rng, double lambda_cd) {
  require(lambda_cd >= 0, "combined loss: lambda_cd must be nonnegative");
  if (lambda_cd == 0) return gan_g_loss;
  return add(gan_g_loss, mul_scalar(cd_loss(student, score, sched, x0, rng), lambda_cd));
}

}  // namespace d2o
