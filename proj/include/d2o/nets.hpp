#pragma once

#include <map>

#include "d2o/adam.hpp"
#include "d2o/dataset.hpp"
#include "d2o/ops.hpp"

namespace d2o {

enum class ParamGroup { Norm, Conv, QKV, Skip, Embed };

inline const char* group_name(ParamGroup g) {
  switch (g) {
    case ParamGroup::Norm: return "Norm";
    case ParamGroup::Conv: return "Conv";
    case ParamGroup::QKV: return "QKV";
    case ParamGroup::Skip: return "Skip";
    case ParamGroup::Embed: return "Embed";
  }
  return "?";
}

template <typename S>
struct Param {
  std::string name;
  ParamGroup group;
  Tensor<S> t;
};

struct UNetConfig {
  int64_t img_size = 16;
  int64_t channels = 1;
  int64_t base_width = 32;
  int64_t levels = 2;
  int64_t blocks_per_level = 2;
  bool attention = true;  // at the lowest resolution
  int64_t temb_dim = 64;
  int64_t num_classes = 4;  // 0 = unconditional
  double sigma_data = 0.5;  // input whitening reference

  // Flat width across levels; capacity at this scale comes from depth and
  // the attention block, and the narrow bottleneck keeps steps cheap.
  int64_t width(int64_t level) const {
    (void)level;
    return base_width;
  }
  int64_t block_count() const { return 2 * levels * blocks_per_level; }
  void validate() const {
    require(img_size > 0 && channels > 0 && base_width > 0 && temb_dim > 0, "bad UNet config");
    require(base_width % 8 == 0, "base width must be divisible by the 8 norm groups");
    require(img_size % (int64_t(1) << (levels - 1)) == 0,
            "image size must be divisible by 2^(levels-1)");
    require(temb_dim % 2 == 0, "time embedding width must be even");
  }
};

// One captured block unit: channel-mean of its input and output at the
// unit's native resolution.
template <typename S>
struct BlockTap {
  int index;
  Tensor<S> input_mean;   // (B,H,W)
  Tensor<S> output_mean;  // (B,H,W)
};
template <typename S>
using BlockTapTrace = std::vector<BlockTap<S>>;

namespace detail {

template <typename S>
Tensor<S> channel_mean_map(const Tensor<S>& x) {
  int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  auto out = Tensor<S>::zeros({B, H, W});
  const S* px = x.data();
  S* po = out.data();
  for (int64_t b = 0; b < B; ++b)
    for (int64_t c = 0; c < C; ++c) {
      const S* plane = px + (b * C + c) * H * W;
      S* dst = po + b * H * W;
      for (int64_t i = 0; i < H * W; ++i) dst[i] += plane[i] / static_cast<S>(C);
    }
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Parameter registry shared by all models

template <typename S>
class ParamRegistry {
 public:
  Tensor<S> reg(const std::string& name, ParamGroup group, Tensor<S> t) {
    t.set_requires_grad(true);
    params_.push_back({name, group, t});
    return t;
  }
  std::vector<Param<S>>& params() { return params_; }
  const std::vector<Param<S>>& params() const { return params_; }

  std::vector<Tensor<S>> tensors() const {
    std::vector<Tensor<S>> out;
    for (const auto& p : params_) out.push_back(p.t);
    return out;
  }
  std::vector<Tensor<S>> trainable() const {
    std::vector<Tensor<S>> out;
    for (const auto& p : params_)
      if (p.t.requires_grad()) out.push_back(p.t);
    return out;
  }
  void zero_grad() {
    for (auto& p : params_) p.t.zero_grad();
  }
  int64_t param_count() const {
    int64_t n = 0;
    for (const auto& p : params_) n += p.t.numel();
    return n;
  }
  void copy_values_from(const ParamRegistry& src) {
    require(src.params_.size() == params_.size(), "parameter copy: register count differs");
    for (size_t i = 0; i < params_.size(); ++i) {
      require(src.params_[i].t.shape() == params_[i].t.shape(),
              "parameter copy: shape differs at " + params_[i].name);
      params_[i].t.values() = src.params_[i].t.values();
    }
  }

 protected:
  std::vector<Param<S>> params_;
};

// ---------------------------------------------------------------------------
// Layer pieces

template <typename S>
struct ConvLayer {
  Tensor<S> w, b;
  int stride = 1, pad = 0;
  Tensor<S> operator()(const Tensor<S>& x) const { return conv2d(x, w, b, stride, pad); }
};

template <typename S>
struct LinearLayer {
  Tensor<S> w, b;
  Tensor<S> operator()(const Tensor<S>& x) const { return linear(x, w, b); }
};

template <typename S>
struct NormLayer {
  Tensor<S> gamma, beta;
  int64_t groups = 8;
  Tensor<S> operator()(const Tensor<S>& x) const { return group_norm(x, gamma, beta, groups); }
};

template <typename S>
struct ResBlock {
  NormLayer<S> gn1, gn2;
  ConvLayer<S> conv1, conv2;  // 3x3
  LinearLayer<S> emb;         // time embedding -> out channels
  ConvLayer<S> skip;          // 1x1, present on every block

  // output = skip(x) + conv path(x, emb)
  Tensor<S> operator()(const Tensor<S>& x, const Tensor<S>& eb) const {
    Tensor<S> h = conv1(silu(gn1(x)));
    h = add(h, spatial_bcast(emb(eb), h.dim(2), h.dim(3)));
    h = conv2(silu(gn2(h)));
    return add(skip(x), h);
  }
};

template <typename S>
struct AttentionBlock {
  NormLayer<S> gn;
  ConvLayer<S> qkv;   // 1x1, C -> 3C
  ConvLayer<S> proj;  // 1x1, C -> C

  Tensor<S> operator()(const Tensor<S>& x) const {
    int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    Tensor<S> h = qkv(gn(x));
    Tensor<S> q = reshape(slice_ch(h, 0, C), {B, C, H * W});
    Tensor<S> k = reshape(slice_ch(h, C, 2 * C), {B, C, H * W});
    Tensor<S> v = reshape(slice_ch(h, 2 * C, 3 * C), {B, C, H * W});
    Tensor<S> scores = mul_scalar(bmm(btrans(q), k), 1.0 / std::sqrt(static_cast<double>(C)));
    Tensor<S> attn = softmax_lastdim(scores);            // (B, HW, HW), rows sum to 1
    Tensor<S> mixed = bmm(v, btrans(attn));              // (B, C, HW)
    Tensor<S> out = proj(reshape(mixed, {B, C, H, W}));
    return add(x, out);
  }
};

// ---------------------------------------------------------------------------
// U-Net

template <typename S>
class UNetModel : public ParamRegistry<S> {
 public:
  UNetConfig cfg;

  explicit UNetModel(const UNetConfig& config, RngState rng) : cfg(config) {
    cfg.validate();
    init(rng);
  }

  UNetModel clone() const {
    UNetModel copy(cfg, RngState(0));
    copy.copy_values_from(*this);
    return copy;
  }

  int64_t forward_calls() const { return forward_calls_; }
  void reset_forward_calls() { forward_calls_ = 0; }

  // Raw network output (same shape as x). sigma has 1 or B entries.
  Tensor<S> forward(const Tensor<S>& x, const std::vector<double>& sigma,
                    const std::vector<int64_t>* class_ids = nullptr,
                    BlockTapTrace<S>* trace = nullptr) const {
    require(x.shape().size() == 4 && x.dim(1) == cfg.channels && x.dim(2) == cfg.img_size &&
                x.dim(3) == cfg.img_size,
            "unet: bad input shape " + shape_str(x.shape()));
    int64_t B = x.dim(0);
    require(sigma.size() == 1 || static_cast<int64_t>(sigma.size()) == B,
            "unet: sigma must be scalar or per-sample");
    if (class_ids) {
      if (cfg.num_classes == 0)
        throw ShapeError("unet: class id given to an unconditional model");
      require(static_cast<int64_t>(class_ids->size()) == B, "unet: class id count mismatch");
    }
    ++forward_calls_;

    // Whiten the input and embed log sigma.
    std::vector<S> cin(static_cast<size_t>(B)), cnoise(static_cast<size_t>(B));
    for (int64_t b = 0; b < B; ++b) {
      double s = sigma[sigma.size() == 1 ? 0 : static_cast<size_t>(b)];
      require(s > 0, "unet: sigma must be positive");
      cin[static_cast<size_t>(b)] = static_cast<S>(1.0 / std::sqrt(cfg.sigma_data * cfg.sigma_data + s * s));
      cnoise[static_cast<size_t>(b)] = static_cast<S>(0.25 * std::log(s));
    }
    Tensor<S> h = mul_per_sample(x, Tensor<S>::from(cin, {B}));

    Tensor<S> eb = embed_sigma(Tensor<S>::from(cnoise, {B}));
    eb = mlp2(silu(mlp1(eb)));
    if (class_ids && cfg.num_classes > 0) eb = add(eb, embed_rows(class_table, *class_ids));
    eb = silu(eb);

    int tap_index = 0;
    auto run_unit = [&](const Tensor<S>& in, const ResBlock<S>& rb,
                        const AttentionBlock<S>* attn) {
      Tensor<S> out = rb(in, eb);
      if (attn) out = (*attn)(out);
      if (trace) {
        NoGradGuard ng;
        trace->push_back({tap_index, detail::channel_mean_map(stop_grad(in)),
                          detail::channel_mean_map(stop_grad(out))});
      }
      ++tap_index;
      return out;
    };

    h = conv_in(h);
    std::vector<Tensor<S>> skips;
    size_t eb_i = 0;
    for (int64_t l = 0; l < cfg.levels; ++l) {
      for (int64_t b = 0; b < cfg.blocks_per_level; ++b) {
        const AttentionBlock<S>* attn = nullptr;
        if (cfg.attention && l == cfg.levels - 1 && b == cfg.blocks_per_level - 1)
          attn = &attn_enc;
        h = run_unit(h, enc[eb_i++], attn);
        skips.push_back(h);
      }
      if (l + 1 < cfg.levels) h = avgpool2(h);
    }
    size_t db_i = 0;
    for (int64_t l = cfg.levels - 1; l >= 0; --l) {
      for (int64_t b = 0; b < cfg.blocks_per_level; ++b) {
        Tensor<S> in = add(h, skips.back());
        skips.pop_back();
        const AttentionBlock<S>* attn = nullptr;
        if (cfg.attention && l == cfg.levels - 1 && b == 0) attn = &attn_dec;
        h = run_unit(in, dec[db_i++], attn);
      }
      if (l > 0) h = up[static_cast<size_t>(cfg.levels - 1 - l)](upsample2(h));
    }
    return conv_out(silu(gn_out(h)));
  }

  Tensor<S> class_table;

  const std::vector<ResBlock<S>>& encoder_blocks() const { return enc; }
  const std::vector<ResBlock<S>>& decoder_blocks() const { return dec; }

 private:
  ConvLayer<S> conv_in, conv_out;
  NormLayer<S> gn_out;
  LinearLayer<S> mlp1, mlp2;
  std::vector<ResBlock<S>> enc, dec;
  std::vector<ConvLayer<S>> up;  // 1x1 after each upsample
  AttentionBlock<S> attn_enc, attn_dec;
  mutable int64_t forward_calls_ = 0;

  Tensor<S> embed_sigma(const Tensor<S>& c) const {
    // geometric frequencies, cos/sin halves
    int64_t B = c.dim(0), half = cfg.temb_dim / 2;
    auto out = Tensor<S>::zeros({B, cfg.temb_dim});
    for (int64_t b = 0; b < B; ++b) {
      double v = static_cast<double>(c.data()[b]);
      for (int64_t i = 0; i < half; ++i) {
        double f = std::exp(std::log(1000.0) * static_cast<double>(i) /
                            static_cast<double>(std::max<int64_t>(half - 1, 1)));
        out.data()[b * cfg.temb_dim + i] = static_cast<S>(std::cos(v * f));
        out.data()[b * cfg.temb_dim + half + i] = static_cast<S>(std::sin(v * f));
      }
    }
    return out;
  }

  Tensor<S> conv_w(RngState& rng, const std::string& name, ParamGroup g, int64_t co, int64_t ci,
                   int64_t k, bool zero = false) {
    auto t = zero ? Tensor<S>::zeros({co, ci, k, k})
                  : Tensor<S>::normal(rng, {co, ci, k, k});
    if (!zero) {
      S scale = static_cast<S>(std::sqrt(2.0 / static_cast<double>(ci * k * k)));
      for (int64_t i = 0; i < t.numel(); ++i) t.data()[i] *= scale;
    }
    return this->reg(name, g, t);
  }

  ConvLayer<S> make_conv(RngState& rng, const std::string& name, ParamGroup g, int64_t co,
                         int64_t ci, int64_t k, int pad, bool zero = false) {
    ConvLayer<S> c;
    c.w = conv_w(rng, name + ".w", g, co, ci, k, zero);
    c.b = this->reg(name + ".b", g, Tensor<S>::zeros({co}));
    c.stride = 1;
    c.pad = pad;
    return c;
  }

  ConvLayer<S> make_skip(RngState& rng, const std::string& name, int64_t co, int64_t ci) {
    ConvLayer<S> c;
    auto t = Tensor<S>::zeros({co, ci, 1, 1});
    if (co == ci) {
      for (int64_t i = 0; i < co; ++i) t.data()[i * ci + i] = S(1);  // identity at init
    } else {
      RngState r2 = rng.fork(fnv1a64(name.data(), name.size()));
      fill_normal(r2, t.data(), t.numel());
      S scale = static_cast<S>(std::sqrt(1.0 / static_cast<double>(ci)));
      for (int64_t i = 0; i < t.numel(); ++i) t.data()[i] *= scale;
    }
    c.w = this->reg(name + ".w", ParamGroup::Skip, t);
    c.b = this->reg(name + ".b", ParamGroup::Skip, Tensor<S>::zeros({co}));
    c.stride = 1;
    c.pad = 0;
    return c;
  }

  LinearLayer<S> make_linear(RngState& rng, const std::string& name, ParamGroup g, int64_t in,
                             int64_t out) {
    LinearLayer<S> l;
    auto t = Tensor<S>::normal(rng, {in, out});
    S scale = static_cast<S>(std::sqrt(1.0 / static_cast<double>(in)));
    for (int64_t i = 0; i < t.numel(); ++i) t.data()[i] *= scale;
    l.w = this->reg(name + ".w", g, t);
    l.b = this->reg(name + ".b", g, Tensor<S>::zeros({out}));
    return l;
  }

  NormLayer<S> make_norm(const std::string& name, int64_t ch) {
    NormLayer<S> n;
    n.gamma = this->reg(name + ".g", ParamGroup::Norm, Tensor<S>::full({ch}, S(1)));
    n.beta = this->reg(name + ".b", ParamGroup::Norm, Tensor<S>::zeros({ch}));
    n.groups = 8;
    return n;
  }

  ResBlock<S> make_block(RngState& rng, const std::string& name, int64_t ci, int64_t co) {
    ResBlock<S> rb;
    rb.gn1 = make_norm(name + ".gn1", ci);
    rb.conv1 = make_conv(rng, name + ".conv1", ParamGroup::Conv, co, ci, 3, 1);
    rb.emb = make_linear(rng, name + ".emb", ParamGroup::Embed, cfg.temb_dim, co);
    rb.gn2 = make_norm(name + ".gn2", co);
    rb.conv2 = make_conv(rng, name + ".conv2", ParamGroup::Conv, co, co, 3, 1, /*zero=*/true);
    rb.skip = make_skip(rng, name + ".skip", co, ci);
    return rb;
  }

  AttentionBlock<S> make_attn(RngState& rng, const std::string& name, int64_t ch) {
    AttentionBlock<S> a;
    a.gn = make_norm(name + ".gn", ch);
    a.qkv = make_conv(rng, name + ".qkv", ParamGroup::QKV, 3 * ch, ch, 1, 0);
    a.proj = make_conv(rng, name + ".proj", ParamGroup::QKV, ch, ch, 1, 0, /*zero=*/true);
    return a;
  }

  void init(RngState rng) {
    conv_in = make_conv(rng, "in", ParamGroup::Conv, cfg.base_width, cfg.channels, 3, 1);
    mlp1 = make_linear(rng, "temb.l1", ParamGroup::Embed, cfg.temb_dim, cfg.temb_dim);
    mlp2 = make_linear(rng, "temb.l2", ParamGroup::Embed, cfg.temb_dim, cfg.temb_dim);
    if (cfg.num_classes > 0)
      class_table = this->reg("temb.class", ParamGroup::Embed,
                              Tensor<S>::zeros({cfg.num_classes, cfg.temb_dim}));
    for (int64_t l = 0; l < cfg.levels; ++l) {
      int64_t wl = cfg.width(l), wp = l == 0 ? cfg.base_width : cfg.width(l - 1);
      for (int64_t b = 0; b < cfg.blocks_per_level; ++b) {
        std::string nm = "enc" + std::to_string(l) + ".b" + std::to_string(b);
        enc.push_back(make_block(rng, nm, b == 0 ? wp : wl, wl));
      }
    }
    if (cfg.attention) {
      attn_enc = make_attn(rng, "enc_attn", cfg.width(cfg.levels - 1));
      attn_dec = make_attn(rng, "dec_attn", cfg.width(cfg.levels - 1));
    }
    for (int64_t l = cfg.levels - 1; l >= 0; --l) {
      int64_t wl = cfg.width(l);
      for (int64_t b = 0; b < cfg.blocks_per_level; ++b) {
        std::string nm = "dec" + std::to_string(l) + ".b" + std::to_string(b);
        dec.push_back(make_block(rng, nm, wl, wl));
      }
      if (l > 0)
        up.push_back(make_conv(rng, "up" + std::to_string(l), ParamGroup::Conv, cfg.width(l - 1),
                               wl, 1, 0));
    }
    gn_out = make_norm("out.gn", cfg.base_width);
    conv_out = make_conv(rng, "out", ParamGroup::Conv, cfg.channels, cfg.base_width, 3, 1,
                         /*zero=*/true);
  }
};

// ---------------------------------------------------------------------------
// Census and freezing

struct CensusRow {
  int64_t count = 0;
  double fraction = 0.0;
};

template <typename S>
std::map<std::string, CensusRow> parameter_census(const UNetModel<S>& model) {
  std::map<std::string, CensusRow> rows;
  for (auto g : {ParamGroup::Norm, ParamGroup::Conv, ParamGroup::QKV, ParamGroup::Skip,
                 ParamGroup::Embed})
    rows[group_name(g)] = CensusRow{};
  int64_t total = 0;
  for (const auto& p : model.params()) {
    rows[group_name(p.group)].count += p.t.numel();
    total += p.t.numel();
  }
  for (auto& [k, v] : rows) v.fraction = static_cast<double>(v.count) / static_cast<double>(total);
  return rows;
}

// Tunable flags per group; Embed is always tunable.
struct FreezePolicy {
  bool norm = true, conv = true, qkv = true, skip = true;

  static FreezePolicy all_tunable() { return {}; }
  static FreezePolicy conv_frozen() { return {true, false, true, true}; }

  bool tunable(ParamGroup g) const {
    switch (g) {
      case ParamGroup::Norm: return norm;
      case ParamGroup::Conv: return conv;
      case ParamGroup::QKV: return qkv;
      case ParamGroup::Skip: return skip;
      case ParamGroup::Embed: return true;
    }
    return true;
  }
};

// Returns the names of frozen parameters. Frozen tensors receive no
// gradients and are skipped by the optimizer.
template <typename S>
std::vector<std::string> apply_freeze(UNetModel<S>& model, const FreezePolicy& policy) {
  std::vector<std::string> frozen;
  for (auto& p : model.params()) {
    bool tune = policy.tunable(p.group);
    p.t.set_requires_grad(tune);
    if (!tune) frozen.push_back(p.name);
  }
  return frozen;
}

template <typename S>
uint64_t param_hash(const ParamRegistry<S>& reg, const std::vector<std::string>& names) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (const auto& p : reg.params()) {
    if (!names.empty() &&
        std::find(names.begin(), names.end(), p.name) == names.end())
      continue;
    h = fnv1a64(p.t.data(), sizeof(S) * static_cast<size_t>(p.t.numel()), h);
  }
  return h;
}

// ---------------------------------------------------------------------------
// Classifier trunk: 3 stages with taps after stages 1 and 2. Doubles as the
// discriminator's frozen feature network and as the 48-d feature extractor.

template <typename S>
class FeatureNet : public ParamRegistry<S> {
 public:
  static constexpr int64_t kFeatureDim = 48;
  int64_t img_size = 16;
  int64_t num_classes = 4;

  FeatureNet(int64_t img, int64_t classes, RngState rng) : img_size(img), num_classes(classes) {
    require(img % 4 == 0, "feature net needs img divisible by 4");
    c1a = make_conv(rng, "s1.c1", 24, 1);
    c1b = make_conv(rng, "s1.c2", 24, 24);
    c2a = make_conv(rng, "s2.c1", 32, 24);
    c2b = make_conv(rng, "s2.c2", 32, 32);
    c3 = make_conv(rng, "s3.c1", kFeatureDim, 32);
    fc = make_linear(rng, "fc", kFeatureDim, num_classes);
  }

  FeatureNet clone() const {
    FeatureNet copy(img_size, num_classes, RngState(0));
    copy.copy_values_from(*this);
    return copy;
  }

  struct Taps {
    Tensor<S> t1;  // (B,24,img,img)
    Tensor<S> t2;  // (B,32,img/2,img/2)
    Tensor<S> features;  // (B,48)
  };

  Taps forward_taps(const Tensor<S>& x) const {
    require(x.shape().size() == 4 && x.dim(2) == img_size && x.dim(3) == img_size,
            "feature net: bad input " + shape_str(x.shape()));
    Taps t;
    Tensor<S> h = leaky_relu(c1b(leaky_relu(c1a(x))));
    t.t1 = h;
    h = leaky_relu(c2b(leaky_relu(c2a(avgpool2(h)))));
    t.t2 = h;
    h = leaky_relu(c3(avgpool2(h)));
    int64_t B = h.dim(0), hw = h.dim(2) * h.dim(3);
    t.features = mul_scalar(spatial_sum(h), 1.0 / static_cast<double>(hw));
    return t;
  }

  Tensor<S> features(const Tensor<S>& x) const { return forward_taps(x).features; }
  Tensor<S> logits(const Tensor<S>& x) const { return fc(features(x)); }

  std::array<int64_t, 2> tap_channels() const { return {24, 32}; }

  void freeze() {
    for (auto& p : this->params_) p.t.set_requires_grad(false);
  }

 private:
  ConvLayer<S> c1a, c1b, c2a, c2b, c3;
  LinearLayer<S> fc;

  ConvLayer<S> make_conv(RngState& rng, const std::string& name, int64_t co, int64_t ci) {
    ConvLayer<S> c;
    auto t = Tensor<S>::normal(rng, {co, ci, 3, 3});
    S scale = static_cast<S>(std::sqrt(2.0 / static_cast<double>(ci * 9)));
    for (int64_t i = 0; i < t.numel(); ++i) t.data()[i] *= scale;
    c.w = this->reg(name + ".w", ParamGroup::Conv, t);
    c.b = this->reg(name + ".b", ParamGroup::Conv, Tensor<S>::zeros({co}));
    c.stride = 1;
    c.pad = 1;
    return c;
  }
  LinearLayer<S> make_linear(RngState& rng, const std::string& name, int64_t in, int64_t out) {
    LinearLayer<S> l;
    auto t = Tensor<S>::normal(rng, {in, out});
    S scale = static_cast<S>(std::sqrt(1.0 / static_cast<double>(in)));
    for (int64_t i = 0; i < t.numel(); ++i) t.data()[i] *= scale;
    l.w = this->reg(name + ".w", ParamGroup::Conv, t);
    l.b = this->reg(name + ".b", ParamGroup::Conv, Tensor<S>::zeros({out}));
    return l;
  }
};

// ---------------------------------------------------------------------------
// Projected multi-scale discriminator: frozen feature taps, small trainable
// heads (two 1x1 convs with a LeakyReLU), optional class projection.

template <typename S>
class Discriminator : public ParamRegistry<S> {
 public:
  FeatureNet<S> feat;
  int64_t num_classes = 0;  // 0 = unconditional

  Discriminator(FeatureNet<S> feature_net, int64_t classes, RngState rng)
      : feat(std::move(feature_net)), num_classes(classes) {
    feat.freeze();
    auto chans = feat.tap_channels();
    for (size_t l = 0; l < chans.size(); ++l) {
      std::string nm = "head" + std::to_string(l);
      heads.push_back(make_head(rng, nm, chans[l]));
      if (num_classes > 0)
        class_proj.push_back(this->reg(nm + ".class", ParamGroup::Embed,
                                       Tensor<S>::zeros({num_classes, chans[l]})));
    }
  }

  size_t scales() const { return heads.size(); }

  // One logit map per tap scale. Feature weights never receive gradients;
  // gradients still flow through them to x.
  std::vector<Tensor<S>> forward(const Tensor<S>& x,
                                 const std::vector<int64_t>* class_ids = nullptr) const {
    if (class_ids && num_classes == 0)
      throw ShapeError("discriminator: class id given in unconditional mode");
    auto taps = feat.forward_taps(x);
    std::array<Tensor<S>, 2> maps = {taps.t1, taps.t2};
    std::vector<Tensor<S>> logits;
    for (size_t l = 0; l < heads.size(); ++l) {
      Tensor<S> h = heads[l].c2(leaky_relu(heads[l].c1(maps[l])));
      if (class_ids) {
        Tensor<S> e = embed_rows(class_proj[l], *class_ids);  // (B,C)
        Tensor<S> w = spatial_bcast(e, maps[l].dim(2), maps[l].dim(3));
        Tensor<S> proj = channel_keep_sum(mul(maps[l], w));
        h = add(h, mul_scalar(proj, 1.0 / std::sqrt(static_cast<double>(maps[l].dim(1)))));
      }
      logits.push_back(h);
    }
    return logits;
  }

  std::vector<Tensor<S>> trainable_heads() const { return this->trainable(); }

 private:
  struct Head {
    ConvLayer<S> c1, c2;
  };
  std::vector<Head> heads;
  std::vector<Tensor<S>> class_proj;

  // channel sum keeping a singleton channel axis
  static Tensor<S> channel_keep_sum(const Tensor<S>& x) {
    Tensor<S> ones = Tensor<S>::full({1, x.dim(1), 1, 1}, S(1));
    return conv2d(x, ones, 1, 0);
  }

  Head make_head(RngState& rng, const std::string& name, int64_t ci) {
    Head h;
    h.c1.w = init_w(rng, name + ".c1.w", 64, ci);
    h.c1.b = this->reg(name + ".c1.b", ParamGroup::Conv, Tensor<S>::zeros({64}));
    h.c1.stride = 1;
    h.c1.pad = 0;
    h.c2.w = init_w(rng, name + ".c2.w", 1, 64);
    h.c2.b = this->reg(name + ".c2.b", ParamGroup::Conv, Tensor<S>::zeros({1}));
    h.c2.stride = 1;
    h.c2.pad = 0;
    return h;
  }
  Tensor<S> init_w(RngState& rng, const std::string& name, int64_t co, int64_t ci) {
    auto t = Tensor<S>::normal(rng, {co, ci, 1, 1});
    S scale = static_cast<S>(std::sqrt(2.0 / static_cast<double>(ci)));
    for (int64_t i = 0; i < t.numel(); ++i) t.data()[i] *= scale;
    return this->reg(name, ParamGroup::Conv, t);
  }
};

// ---------------------------------------------------------------------------
// Classifier pre-training (feature network for discriminator and metrics)

struct ClassifierReport {
  double train_loss = 0.0;
  double holdout_accuracy = 0.0;
  int64_t epochs = 0;
};

template <typename S>
Tensor<S> cross_entropy(const Tensor<S>& logits, const std::vector<int64_t>& labels) {
  int64_t B = logits.dim(0), K = logits.dim(1);
  Tensor<S> sm = softmax_lastdim(logits);
  Tensor<S> onehot = Tensor<S>::zeros({B, K});
  for (int64_t b = 0; b < B; ++b) onehot.data()[b * K + labels[static_cast<size_t>(b)]] = S(1);
  Tensor<S> picked = rowsum_bcast(mul(log(add_scalar(sm, 1e-12)), onehot));
  return mul_scalar(mean_all(picked), -static_cast<double>(K));
}

template <typename S>
double classifier_accuracy(const FeatureNet<S>& net, const Dataset& data, int64_t lo, int64_t hi) {
  NoGradGuard ng;
  int64_t correct = 0, total = 0;
  for (int64_t at = lo; at < hi; at += 256) {
    int64_t end = std::min(hi, at + 256);
    std::vector<int64_t> idx;
    for (int64_t i = at; i < end; ++i) idx.push_back(i);
    auto logits = net.logits(data.batch<S>(idx));
    auto labels = data.labels_of(idx);
    int64_t K = logits.dim(1);
    for (size_t b = 0; b < idx.size(); ++b) {
      int64_t best = 0;
      for (int64_t k = 1; k < K; ++k)
        if (logits.data()[static_cast<int64_t>(b) * K + k] >
            logits.data()[static_cast<int64_t>(b) * K + best])
          best = k;
      correct += best == labels[b];
      ++total;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(total);
}

// Trains on the first 90% of the dataset, reports held-out accuracy on the
// rest, and freezes the weights. Throws if the accuracy target is missed.
template <typename S>
ClassifierReport pretrain_feature_net(FeatureNet<S>& net, const Dataset& data, int64_t epochs,
                                      RngState rng, double lr = 1e-3,
                                      double accuracy_target = 0.90) {
  int64_t split = data.n * 9 / 10;
  int64_t batch = 128;
  auto params = net.trainable();
  AdamState<S> opt(lr, 0.9, 0.999);
  Tape<S>& tape = Tape<S>::active();
  ClassifierReport rep;
  rep.epochs = epochs;
  for (int64_t e = 0; e < epochs; ++e) {
    double loss_sum = 0;
    int64_t steps = 0;
    for (int64_t at = 0; at + batch <= split; at += batch) {
      auto idx = data.draw_indices(rng, batch);
      for (auto& i : idx) i %= split;
      tape.clear();
      net.zero_grad();
      auto loss = cross_entropy(net.logits(data.batch<S>(idx)), data.labels_of(idx));
      double lv = static_cast<double>(loss.item());
      if (!std::isfinite(lv)) throw NumericError("classifier training produced non-finite loss");
      tape.backward(loss);
      adam_step(params, opt);
      loss_sum += lv;
      ++steps;
    }
    rep.train_loss = loss_sum / static_cast<double>(std::max<int64_t>(steps, 1));
  }
  tape.clear();
  rep.holdout_accuracy = classifier_accuracy(net, data, split, data.n);
  if (rep.holdout_accuracy < accuracy_target)
    throw NumericError("feature net reached only " + std::to_string(rep.holdout_accuracy) +
                       " held-out accuracy");
  net.freeze();
  return rep;
}

}  // namespace d2o
