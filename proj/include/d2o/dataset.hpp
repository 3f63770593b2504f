#pragma once

#include <fstream>

#include "d2o/ops.hpp"

namespace d2o {

// Synthetic grayscale images: K Gaussian bumps on a black background,
// K in {1,2,3,4} doubling as the class label. Pixels are clipped to [0,1]
// and mapped to [-1,1]. Every image is a pure function of (seed, index).
struct SynthSpec {
  int64_t img_size = 16;
  int64_t channels = 1;
  int64_t num_classes = 4;
  double margin = 3.0;       // bump centers stay this far from the border
  double amp_lo = 0.5, amp_hi = 1.0;
  double width_lo = 1.5, width_hi = 3.0;
};

inline void synth_image(const SynthSpec& spec, uint64_t seed, uint64_t index, float* out,
                        uint8_t* label) {
  RngState rng(RngState::mix(seed ^ RngState::mix(index + 0x51ed270b7a03f944ull)));
  int64_t n = spec.img_size;
  int64_t k = 1 + rng.next_below(spec.num_classes);
  *label = static_cast<uint8_t>(k);
  std::vector<double> img(static_cast<size_t>(n * n), 0.0);
  for (int64_t b = 0; b < k; ++b) {
    double cx = rng.next_range(spec.margin, static_cast<double>(n - 1) - spec.margin);
    double cy = rng.next_range(spec.margin, static_cast<double>(n - 1) - spec.margin);
    double amp = rng.next_range(spec.amp_lo, spec.amp_hi);
    double w = rng.next_range(spec.width_lo, spec.width_hi);
    double inv = 1.0 / (2.0 * w * w);
    for (int64_t y = 0; y < n; ++y)
      for (int64_t x = 0; x < n; ++x) {
        double d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
        img[static_cast<size_t>(y * n + x)] += amp * std::exp(-d2 * inv);
      }
  }
  for (int64_t i = 0; i < n * n; ++i) {
    double v = std::clamp(img[static_cast<size_t>(i)], 0.0, 1.0);
    out[i] = static_cast<float>(2.0 * v - 1.0);
  }
}

struct Dataset {
  SynthSpec spec;
  int64_t n = 0;
  uint64_t seed = 0;
  std::vector<float> pixels;   // n * img_size^2, row-major per image
  std::vector<uint8_t> labels; // bump counts, 1-based

  int64_t image_numel() const { return spec.img_size * spec.img_size; }

  template <typename S>
  Tensor<S> image(int64_t i) const {
    auto t = Tensor<S>::zeros({1, 1, spec.img_size, spec.img_size});
    const float* src = pixels.data() + i * image_numel();
    for (int64_t j = 0; j < image_numel(); ++j) t.data()[j] = static_cast<S>(src[j]);
    return t;
  }

  // Stacks the given indices into a (B,1,H,W) batch.
  template <typename S>
  Tensor<S> batch(const std::vector<int64_t>& idx) const {
    int64_t m = image_numel();
    auto t = Tensor<S>::zeros({static_cast<int64_t>(idx.size()), 1, spec.img_size, spec.img_size});
    for (size_t b = 0; b < idx.size(); ++b) {
      const float* src = pixels.data() + idx[b] * m;
      S* dst = t.data() + static_cast<int64_t>(b) * m;
      for (int64_t j = 0; j < m; ++j) dst[j] = static_cast<S>(src[j]);
    }
    return t;
  }

  std::vector<int64_t> draw_indices(RngState& rng, int64_t count) const {
    std::vector<int64_t> idx(static_cast<size_t>(count));
    for (auto& i : idx) i = rng.next_below(n);
    return idx;
  }

  std::vector<int64_t> labels_of(const std::vector<int64_t>& idx) const {
    std::vector<int64_t> out(idx.size());
    for (size_t i = 0; i < idx.size(); ++i) out[i] = static_cast<int64_t>(labels[idx[i]]) - 1;
    return out;
  }
};

inline Dataset make_dataset(const SynthSpec& spec, int64_t n, uint64_t seed) {
  Dataset d;
  d.spec = spec;
  d.n = n;
  d.seed = seed;
  d.pixels.resize(static_cast<size_t>(n * spec.img_size * spec.img_size));
  d.labels.resize(static_cast<size_t>(n));
  int64_t m = spec.img_size * spec.img_size;
  parallel_for(n, [&](int64_t lo, int64_t hi) {
    for (int64_t i = lo; i < hi; ++i)
      synth_image(spec, seed, static_cast<uint64_t>(i), d.pixels.data() + i * m,
                  &d.labels[static_cast<size_t>(i)]);
  }, 64);
  return d;
}

// File layout: magic, version, counts, raw records, FNV-1a trailer.
inline void save_dataset(const Dataset& d, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path + " for writing");
  std::string buf;
  auto put = [&](const void* p, size_t n) { buf.append(static_cast<const char*>(p), n); };
  buf.append("D2OD");
  uint32_t version = 1;
  put(&version, 4);
  uint32_t n32 = static_cast<uint32_t>(d.n), sz = static_cast<uint32_t>(d.spec.img_size),
           ch = static_cast<uint32_t>(d.spec.channels);
  uint64_t seed = d.seed;
  put(&n32, 4);
  put(&sz, 4);
  put(&ch, 4);
  put(&seed, 8);
  int64_t m = d.image_numel();
  for (int64_t i = 0; i < d.n; ++i) {
    put(&d.labels[static_cast<size_t>(i)], 1);
    put(d.pixels.data() + i * m, sizeof(float) * static_cast<size_t>(m));
  }
  uint64_t sum = fnv1a64(buf.data(), buf.size());
  put(&sum, 8);
  f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!f) throw IoError("short write to " + path);
}

inline Dataset load_dataset(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path);
  std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (buf.size() < 32 || buf.compare(0, 4, "D2OD") != 0)
    throw IoError(path + ": not a dataset file");
  uint64_t stored;
  std::memcpy(&stored, buf.data() + buf.size() - 8, 8);
  if (stored != fnv1a64(buf.data(), buf.size() - 8)) throw IoError(path + ": checksum mismatch");
  size_t off = 4;
  auto get = [&](void* p, size_t n) {
    std::memcpy(p, buf.data() + off, n);
    off += n;
  };
  uint32_t version, n32, sz, ch;
  get(&version, 4);
  if (version != 1) throw IoError(path + ": unsupported dataset version");
  Dataset d;
  uint64_t seed;
  get(&n32, 4);
  get(&sz, 4);
  get(&ch, 4);
  get(&seed, 8);
  d.n = n32;
  d.seed = seed;
  d.spec.img_size = sz;
  d.spec.channels = ch;
  int64_t m = d.image_numel();
  d.pixels.resize(static_cast<size_t>(d.n * m));
  d.labels.resize(static_cast<size_t>(d.n));
  for (int64_t i = 0; i < d.n; ++i) {
    get(&d.labels[static_cast<size_t>(i)], 1);
    get(d.pixels.data() + i * m, sizeof(float) * static_cast<size_t>(m));
  }
  return d;
}

}  // namespace d2o
