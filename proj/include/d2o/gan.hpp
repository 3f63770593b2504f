#pragma once

#include "d2o/nets.hpp"

namespace d2o {

// Non-saturating objectives in softplus (logit) form, per scale: the
// discriminator pushes real logits up and fake logits down, the generator
// pushes fake logits up. Each map is averaged over its elements, scales are
// summed.
template <typename S>
Tensor<S> gan_d_loss(const Discriminator<S>& disc, const Tensor<S>& real,
                     const Tensor<S>& fake_const,
                     const std::vector<int64_t>* class_ids = nullptr) {
  require(real.shape() == fake_const.shape(), "gan_d_loss: real/fake shape mismatch");
  auto lr = disc.forward(real, class_ids);
  auto lf = disc.forward(fake_const, class_ids);
  Tensor<S> total;
  for (size_t l = 0; l < lr.size(); ++l) {
    Tensor<S> d = add(mean_all(softplus(mul_scalar(lr[l], -1.0))), mean_all(softplus(lf[l])));
    total = total.defined() ? add(total, d) : d;
  }
  return total;
}

template <typename S>
Tensor<S> gan_g_loss(const Discriminator<S>& disc, const Tensor<S>& fake,
                     const std::vector<int64_t>* class_ids = nullptr) {
  auto lf = disc.forward(fake, class_ids);
  Tensor<S> total;
  for (auto& l : lf) {
    Tensor<S> g = mean_all(softplus(mul_scalar(l, -1.0)));
    total = total.defined() ? add(total, g) : g;
  }
  return total;
}

// Both sides at once; the discriminator side sees the fake through a
// stop-gradient.
template <typename S>
std::pair<Tensor<S>, Tensor<S>> gan_losses(const Discriminator<S>& disc, const Tensor<S>& real,
                                           const Tensor<S>& fake,
                                           const std::vector<int64_t>* class_ids = nullptr) {
  return {gan_d_loss(disc, real, stop_grad(fake), class_ids), gan_g_loss(disc, fake, class_ids)};
}

// (gamma/2) * mean over the batch of |d/dx sum_l sum(D_l(P_l(x)))|^2 at
// real data, via a differentiable inner backward.
template <typename S>
Tensor<S> r1_penalty(const Discriminator<S>& disc, const Tensor<S>& real, double gamma_r1,
                     const std::vector<int64_t>* class_ids = nullptr) {
  require(gamma_r1 >= 0, "r1_penalty: gamma must be nonnegative");
  if (gamma_r1 == 0) return Tensor<S>::scalar(S(0));
  Tensor<S> x = real.detach().set_requires_grad(true);
  auto logits = disc.forward(x, class_ids);
  Tensor<S> total;
  for (auto& l : logits) {
    Tensor<S> s = sum_all(l);
    total = total.defined() ? add(total, s) : s;
  }
  Tensor<S> gx = Tape<S>::active().grad(total, {x}, /*create_graph=*/true)[0];
  if (!gx.requires_grad() && gx.is_leaf()) {
    // constant discriminator: gradient is identically zero
    return Tensor<S>::scalar(S(0));
  }
  Tensor<S> per_sample = sample_dot(gx, gx);
  Tensor<S> penalty = mul_scalar(mean_all(per_sample), 0.5 * gamma_r1);
  if (!std::isfinite(static_cast<double>(penalty.item())))
    throw NumericError("r1_penalty: non-finite gradient penalty");
  return penalty;
}

// ---------------------------------------------------------------------------
// EMA with warmup: effective half-life is capped by warmup_ratio multiplied
// by the images seen so far, so early shadows track the live weights.

template <typename S>
struct EmaState {
  std::vector<std::vector<S>> shadow;
  int64_t images_seen = 0;

  template <typename Model>
  void init(const Model& model) {
    shadow.clear();
    for (const auto& p : model.params()) {
      shadow.emplace_back(p.t.data(), p.t.data() + p.t.numel());
    }
    images_seen = 0;
  }

  template <typename Model>
  Model snapshot(const Model& model) const {
    Model copy = model.clone();
    auto& params = copy.params();
    require(params.size() == shadow.size(), "ema snapshot: parameter count mismatch");
    for (size_t i = 0; i < params.size(); ++i)
      std::copy(shadow[i].begin(), shadow[i].end(), params[i].t.data());
    return copy;
  }
};

inline double ema_beta(int64_t batch_size, int64_t images_seen, double halflife_img,
                       double warmup_ratio) {
  double h_eff = std::min(halflife_img, warmup_ratio * static_cast<double>(images_seen));
  if (h_eff <= 0) return 0.0;
  return std::pow(0.5, static_cast<double>(batch_size) / h_eff);
}

template <typename S, typename Model>
void ema_update(EmaState<S>& ema, const Model& model, int64_t batch_size, double halflife_img,
                double warmup_ratio) {
  ema.images_seen += batch_size;
  double beta = ema_beta(batch_size, ema.images_seen, halflife_img, warmup_ratio);
  const auto& params = model.params();
  require(params.size() == ema.shadow.size(), "ema_update: parameter count mismatch");
  for (size_t i = 0; i < params.size(); ++i) {
    const S* live = params[i].t.data();
    S* sh = ema.shadow[i].data();
    int64_t n = params[i].t.numel();
    for (int64_t j = 0; j < n; ++j)
      sh[j] = static_cast<S>(beta * sh[j] + (1.0 - beta) * live[j]);
  }
}

// ---------------------------------------------------------------------------
// Ablation-only augmentation: a shared per-sample draw of horizontal flip
// and integer translation (|d| <= 2, zero fill) applied identically to the
// real and fake batches. Pure index shuffling, differentiable in pixels.

template <typename S>
std::pair<Tensor<S>, Tensor<S>> augment_pair(const Tensor<S>& real, const Tensor<S>& fake,
                                             RngState& rng, bool enabled) {
  if (!enabled) return {real, fake};
  require(real.dim(0) == fake.dim(0), "augment_pair: batch mismatch");
  int64_t B = real.dim(0);
  auto apply = [&](const Tensor<S>& x, const std::vector<int>& flips,
                   const std::vector<int>& dys, const std::vector<int>& dxs) {
    std::vector<Tensor<S>> rows;
    for (int64_t b = 0; b < B; ++b) {
      Tensor<S> row = slice_batch(x, b);
      if (flips[static_cast<size_t>(b)]) row = flip_w(row);
      if (dys[static_cast<size_t>(b)] != 0 || dxs[static_cast<size_t>(b)] != 0)
        row = shift2d(row, dys[static_cast<size_t>(b)], dxs[static_cast<size_t>(b)]);
      rows.push_back(row);
    }
    return concat_batch(rows);
  };
  std::vector<int> flips(static_cast<size_t>(B)), dys(static_cast<size_t>(B)),
      dxs(static_cast<size_t>(B));
  for (int64_t b = 0; b < B; ++b) {
    flips[static_cast<size_t>(b)] = static_cast<int>(rng.next_below(2));
    dys[static_cast<size_t>(b)] = static_cast<int>(rng.next_below(5)) - 2;
    dxs[static_cast<size_t>(b)] = static_cast<int>(rng.next_below(5)) - 2;
  }
  return {apply(real, flips, dys, dxs), apply(fake, flips, dys, dxs)};
}

}  // namespace d2o
