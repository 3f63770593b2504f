#pragma once

#include "d2o/nets.hpp"

namespace d2o {

// Time-step scheduler T(i,N): T(0,N)=sigma_min, T(N,N)=sigma_max, strictly
// increasing in i.
struct Schedule {
  int64_t steps = 18;
  double rho = 7.0;
  double sigma_min = 0.002;
  double sigma_max = 80.0;

  double t(int64_t i) const { return t(i, steps); }
  double t(int64_t i, int64_t n) const {
    if (i < 0 || i > n) throw ShapeError("schedule index out of range");
    double a = std::pow(sigma_max, 1.0 / rho);
    double b = std::pow(sigma_min, 1.0 / rho);
    double frac = 1.0 - static_cast<double>(i) / static_cast<double>(n);
    return std::pow(a + frac * (b - a), rho);
  }
};

// c_skip/c_out mixing of input and raw network output. c_skip(eps)=1 and
// c_out(eps)=0, so the denoiser is exactly the identity at the boundary.
struct Precond {
  double sigma_data = 0.5;
  double eps = 0.002;

  double c_skip(double t) const {
    double d = t - eps;
    return sigma_data * sigma_data / (d * d + sigma_data * sigma_data);
  }
  double c_out(double t) const {
    return sigma_data * (t - eps) / std::sqrt(sigma_data * sigma_data + t * t);
  }
};

// Denoiser as a value: x0_hat = den(x, sigma). The traced variant can also
// capture per-block feature taps.
template <typename S>
using DenoiseFn = std::function<Tensor<S>(const Tensor<S>&, const std::vector<double>&)>;
template <typename S>
using TracedDenoiseFn =
    std::function<Tensor<S>(const Tensor<S>&, const std::vector<double>&, BlockTapTrace<S>*)>;

template <typename S>
Tensor<S> denoise(const UNetModel<S>& net, const Precond& pc, const Tensor<S>& x,
                  const std::vector<double>& sigma, const std::vector<int64_t>* class_ids = nullptr,
                  BlockTapTrace<S>* trace = nullptr) {
  int64_t B = x.dim(0);
  size_t nsig = sigma.size();
  std::vector<S> cs(static_cast<size_t>(B)), co(static_cast<size_t>(B));
  for (int64_t b = 0; b < B; ++b) {
    double s = sigma[nsig == 1 ? 0 : static_cast<size_t>(b)];
    if (s < pc.eps) throw ShapeError("denoise: sigma below the parameterization boundary");
    cs[static_cast<size_t>(b)] = static_cast<S>(pc.c_skip(s));
    co[static_cast<size_t>(b)] = static_cast<S>(pc.c_out(s));
  }
  Tensor<S> raw = net.forward(x, sigma, class_ids, trace);
  if (!raw.all_finite()) throw NumericError("denoise: non-finite network output");
  return add(mul_per_sample(x, Tensor<S>::from(cs, {B})),
             mul_per_sample(raw, Tensor<S>::from(co, {B})));
}

template <typename S>
TracedDenoiseFn<S> make_denoiser(const UNetModel<S>& net, const Precond& pc,
                                 std::vector<int64_t> class_ids = {}) {
  return [&net, pc, class_ids](const Tensor<S>& x, const std::vector<double>& sigma,
                               BlockTapTrace<S>* trace) {
    return denoise(net, pc, x, sigma, class_ids.empty() ? nullptr : &class_ids, trace);
  };
}

template <typename S>
DenoiseFn<S> untraced(const TracedDenoiseFn<S>& den) {
  return [den](const Tensor<S>& x, const std::vector<double>& sigma) {
    return den(x, sigma, nullptr);
  };
}

namespace detail {
inline std::vector<double> per_sample(const std::vector<double>& v, int64_t B) {
  if (static_cast<int64_t>(v.size()) == B) return v;
  require(v.size() == 1, "sigma vector must have 1 or B entries");
  return std::vector<double>(static_cast<size_t>(B), v[0]);
}
template <typename S>
Tensor<S> coeff(const std::vector<double>& v) {
  std::vector<S> c(v.size());
  for (size_t i = 0; i < v.size(); ++i) c[i] = static_cast<S>(v[i]);
  return Tensor<S>::from(std::move(c), {static_cast<int64_t>(v.size())});
}
}  // namespace detail

// x_t = x0 + sigma * n with standard normal n.
template <typename S>
Tensor<S> perturb(const Tensor<S>& x0, const std::vector<double>& sigma, RngState& rng) {
  for (double s : sigma) require(s >= 0, "perturb: sigma must be nonnegative");
  Tensor<S> n = Tensor<S>::normal(rng, x0.shape());
  auto sig = detail::per_sample(sigma, x0.dim(0));
  return add(x0, mul_per_sample(n, detail::coeff<S>(sig)));
}
template <typename S>
Tensor<S> perturb(const Tensor<S>& x0, double sigma, RngState& rng) {
  return perturb(x0, std::vector<double>{sigma}, rng);
}

// One explicit Euler step of the sampling ODE from t down to s:
//   ((t-s)/t) (den(x,t) - x) + x.
// s = 0 gives coefficient 1, i.e. the denoiser output itself.
template <typename S>
Tensor<S> euler_step(const DenoiseFn<S>& den, const Tensor<S>& x, std::vector<double> t,
                     std::vector<double> s) {
  int64_t B = x.dim(0);
  auto tv = detail::per_sample(t, B), sv = detail::per_sample(s, B);
  std::vector<double> c(static_cast<size_t>(B));
  for (int64_t b = 0; b < B; ++b) {
    require(tv[static_cast<size_t>(b)] > 0, "euler_step: t must be positive");
    require(sv[static_cast<size_t>(b)] >= 0 && sv[static_cast<size_t>(b)] <= tv[static_cast<size_t>(b)],
            "euler_step: need 0 <= s <= t");
    c[static_cast<size_t>(b)] =
        (tv[static_cast<size_t>(b)] - sv[static_cast<size_t>(b)]) / tv[static_cast<size_t>(b)];
  }
  Tensor<S> g = den(x, tv);
  return add(x, mul_per_sample(sub(g, x), detail::coeff<S>(c)));
}

// Heun step: trapezoidal correction of the Euler step. s = 0 falls back to
// the single-evaluation Euler limit.
template <typename S>
Tensor<S> heun_step(const DenoiseFn<S>& den, const Tensor<S>& x, std::vector<double> t,
                    std::vector<double> s) {
  int64_t B = x.dim(0);
  auto tv = detail::per_sample(t, B), sv = detail::per_sample(s, B);
  bool szero = sv[0] == 0.0;
  std::vector<double> inv_t(static_cast<size_t>(B)), st(static_cast<size_t>(B)),
      half_st(static_cast<size_t>(B)), inv_s(static_cast<size_t>(B));
  for (int64_t b = 0; b < B; ++b) {
    size_t i = static_cast<size_t>(b);
    require(tv[i] > 0, "heun_step: t must be positive");
    require(sv[i] >= 0 && sv[i] < tv[i], "heun_step: need 0 <= s < t");
    require((sv[i] == 0.0) == szero, "heun_step: mixed zero/nonzero targets");
    inv_t[i] = 1.0 / tv[i];
    st[i] = sv[i] - tv[i];
    half_st[i] = 0.5 * (sv[i] - tv[i]);
    if (!szero) inv_s[i] = 1.0 / sv[i];
  }
  Tensor<S> g = den(x, tv);
  if (szero) {
    // single-evaluation limit, same expression euler_step uses
    std::vector<double> c(static_cast<size_t>(B));
    for (size_t i = 0; i < c.size(); ++i) c[i] = (tv[i] - sv[i]) / tv[i];
    return add(x, mul_per_sample(sub(g, x), detail::coeff<S>(c)));
  }
  Tensor<S> d = mul_per_sample(sub(x, g), detail::coeff<S>(inv_t));
  Tensor<S> xe = add(x, mul_per_sample(d, detail::coeff<S>(st)));
  Tensor<S> d2 = mul_per_sample(sub(xe, den(xe, sv)), detail::coeff<S>(inv_s));
  return add(x, mul_per_sample(add(d, d2), detail::coeff<S>(half_st)));
}

enum class Solver { Euler, Heun };

template <typename S>
struct SampleStep {
  double t;
  Tensor<S> input;    // I_t: solver input at this step
  Tensor<S> den_out;  // O_t: denoiser estimate at this step
  BlockTapTrace<S> taps;
};

template <typename S>
struct SampleResult {
  Tensor<S> image;
  std::vector<SampleStep<S>> trajectory;
};

// Integrates from sigma_max down the sub-schedule T(., steps); the final
// application takes the s -> 0 limit and therefore returns the denoiser
// estimate at the last nonzero sigma. steps = 1 is one-step generation,
// g(x, sigma_max), exactly.
template <typename S>
SampleResult<S> sample_from(const TracedDenoiseFn<S>& den, const Schedule& sched, int64_t steps,
                            Tensor<S> x, Solver solver, bool with_taps = false) {
  require(steps >= 1 && steps <= sched.steps, "sample: need 1 <= steps <= schedule steps");
  NoGradGuard ng;
  SampleResult<S> res;
  for (int64_t j = steps; j >= 1; --j) {
    double t = sched.t(j, steps);
    double s = j > 1 ? sched.t(j - 1, steps) : 0.0;
    SampleStep<S> step;
    step.t = t;
    step.input = x;
    Tensor<S> g = den(x, {t}, with_taps ? &step.taps : nullptr);
    step.den_out = g;
    if (j > 1) {
      double c = (t - s) / t;
      if (solver == Solver::Euler) {
        x = add(x, mul_scalar(sub(g, x), c));
      } else {
        Tensor<S> d = mul_scalar(sub(x, g), 1.0 / t);
        Tensor<S> xe = add(x, mul_scalar(d, s - t));
        Tensor<S> g2 = den(xe, {s}, nullptr);
        Tensor<S> d2 = mul_scalar(sub(xe, g2), 1.0 / s);
        x = add(x, mul_scalar(add(d, d2), 0.5 * (s - t)));
      }
    } else {
      x = g;
    }
    res.trajectory.push_back(std::move(step));
  }
  res.image = x;
  return res;
}

template <typename S>
SampleResult<S> sample(const TracedDenoiseFn<S>& den, const Schedule& sched, int64_t steps,
                       RngState& rng, Solver solver, Shape img_shape, bool with_taps = false) {
  Tensor<S> z = Tensor<S>::normal(rng, std::move(img_shape));
  return sample_from(den, sched, steps, mul_scalar(z, sched.sigma_max), solver, with_taps);
}

// Pre-training objective: lognormal sigma draw per sample, weighted squared
// error of the denoised estimate against the clean image.
struct EdmLossConfig {
  double logmean = -1.2;
  double logstd = 1.2;
};

template <typename S>
Tensor<S> edm_loss(const DenoiseFn<S>& den, const Precond& pc, const Schedule& sched,
                   const Tensor<S>& x0, RngState& rng, const EdmLossConfig& cfg = {}) {
  require(x0.dim(0) >= 1, "edm_loss: empty batch");
  int64_t B = x0.dim(0);
  std::vector<double> sig(static_cast<size_t>(B));
  std::vector<double> weight(static_cast<size_t>(B));
  double npix = static_cast<double>(x0.numel() / B);
  for (int64_t b = 0; b < B; ++b) {
    double s = std::exp(cfg.logmean + cfg.logstd * rng.next_normal());
    s = std::clamp(s, pc.eps, sched.sigma_max);
    sig[static_cast<size_t>(b)] = s;
    double sd = pc.sigma_data;
    weight[static_cast<size_t>(b)] = (s * s + sd * sd) / ((s * sd) * (s * sd)) / npix;
  }
  Tensor<S> xt = perturb(x0, sig, rng);
  Tensor<S> d = sub(den(xt, sig), x0);
  Tensor<S> per = sample_dot(d, d);
  Tensor<S> loss = mean_all(mul_per_sample(per, detail::coeff<S>(weight)));
  if (!std::isfinite(static_cast<double>(loss.item())))
    throw NumericError("edm_loss: non-finite loss");
  return loss;
}

}  // namespace d2o
