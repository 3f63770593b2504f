#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <unordered_map>
#include <unordered_set>

#include "d2o/common.hpp"
#include "d2o/rng.hpp"

namespace d2o {

// 64-byte aligned allocator so data plays well with wide vector loads.
template <typename S>
struct AlignedAlloc {
  using value_type = S;
  AlignedAlloc() = default;
  template <typename U>
  AlignedAlloc(const AlignedAlloc<U>&) {}
  S* allocate(size_t n) {
    void* p = ::operator new(n * sizeof(S), std::align_val_t(64));
    return static_cast<S*>(p);
  }
  void deallocate(S* p, size_t) { ::operator delete(p, std::align_val_t(64)); }
  bool operator==(const AlignedAlloc&) const { return true; }
};

template <typename S>
using AVec = std::vector<S, AlignedAlloc<S>>;

// Recycles exact-size buffers so steady-state training steps allocate
// nothing. Per-thread; tensors are created and destroyed on the op thread.
template <typename S>
class BufferPool {
 public:
  static BufferPool& instance() {
    static thread_local BufferPool pool;
    return pool;
  }
  AVec<S> get(int64_t n, bool zeroed) {
    auto it = free_.find(n);
    if (it != free_.end() && !it->second.empty()) {
      AVec<S> v = std::move(it->second.back());
      it->second.pop_back();
      held_ -= n * static_cast<int64_t>(sizeof(S));
      if (zeroed) std::fill(v.begin(), v.end(), S(0));
      return v;
    }
    return AVec<S>(static_cast<size_t>(n));
  }
  void put(AVec<S>&& v) {
    int64_t bytes = static_cast<int64_t>(v.size() * sizeof(S));
    if (bytes == 0 || held_ + bytes > kCapBytes) return;
    held_ += bytes;
    free_[static_cast<int64_t>(v.size())].push_back(std::move(v));
  }

 private:
  static constexpr int64_t kCapBytes = int64_t(3) << 30;
  std::unordered_map<int64_t, std::vector<AVec<S>>> free_;
  int64_t held_ = 0;
};

template <typename S>
struct TensorImpl {
  Shape shape;
  AVec<S> v;
  bool requires_grad = false;
  AVec<S> grad;   // leaf accumulator, allocated on first backward
  int64_t tape_id = -1;  // index of the producing tape entry, -1 for leaves

  ~TensorImpl() {
    BufferPool<S>::instance().put(std::move(v));
    BufferPool<S>::instance().put(std::move(grad));
  }
};

// Value-semantics handle over a shared buffer. All operations are pure; the
// only mutation points are leaf value/grad buffers (optimizer, grad reset).
template <typename S>
class Tensor {
 public:
  using Scalar = S;

  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    Tensor t;
    t.p = std::make_shared<TensorImpl<S>>();
    t.p->shape = std::move(shape);
    t.p->v = BufferPool<S>::instance().get(numel_of(t.p->shape), /*zeroed=*/true);
    t.p->requires_grad = requires_grad;
    return t;
  }
  // Contents unspecified; for ops that overwrite every element.
  static Tensor uninit(Shape shape) {
    Tensor t;
    t.p = std::make_shared<TensorImpl<S>>();
    t.p->shape = std::move(shape);
    t.p->v = BufferPool<S>::instance().get(numel_of(t.p->shape), /*zeroed=*/false);
    return t;
  }
  static Tensor full(Shape shape, S value) {
    Tensor t = uninit(std::move(shape));
    std::fill(t.p->v.begin(), t.p->v.end(), value);
    return t;
  }
  static Tensor from(const std::vector<S>& values, Shape shape, bool requires_grad = false) {
    if (static_cast<int64_t>(values.size()) != numel_of(shape))
      throw ShapeError("value count does not match shape " + shape_str(shape));
    Tensor t = uninit(std::move(shape));
    std::copy(values.begin(), values.end(), t.p->v.begin());
    t.p->requires_grad = requires_grad;
    return t;
  }
  static Tensor scalar(S value) { return from({value}, {1}); }
  static Tensor normal(RngState& rng, Shape shape, bool requires_grad = false) {
    Tensor t = uninit(std::move(shape));
    t.p->requires_grad = requires_grad;
    fill_normal(rng, t.data(), t.numel());
    return t;
  }

  bool defined() const { return static_cast<bool>(p); }
  const Shape& shape() const { return p->shape; }
  int64_t numel() const { return static_cast<int64_t>(p->v.size()); }
  int64_t dim(int i) const { return p->shape.at(static_cast<size_t>(i)); }
  S* data() { return p->v.data(); }
  const S* data() const { return p->v.data(); }
  AVec<S>& values() { return p->v; }
  const AVec<S>& values() const { return p->v; }

  bool requires_grad() const { return p->requires_grad; }
  bool is_leaf() const { return p->tape_id < 0; }
  Tensor& set_requires_grad(bool rg) {
    if (p->tape_id >= 0) throw TapeError("requires_grad can only be toggled on leaves");
    p->requires_grad = rg;
    return *this;
  }

  S item() const {
    if (numel() != 1) throw ShapeError("item() needs a scalar, got " + shape_str(p->shape));
    return p->v[0];
  }

  // Deep copy detached from the graph.
  Tensor detach() const {
    Tensor t = uninit(p->shape);
    std::copy(p->v.begin(), p->v.end(), t.p->v.begin());
    return t;
  }

  AVec<S>& grad_buf() {
    if (p->grad.empty())
      p->grad = BufferPool<S>::instance().get(static_cast<int64_t>(p->v.size()), true);
    return p->grad;
  }
  bool has_grad() const { return !p->grad.empty(); }
  void zero_grad() { std::fill(p->grad.begin(), p->grad.end(), S(0)); }

  bool all_finite() const {
    for (S x : p->v)
      if (!std::isfinite(static_cast<double>(x))) return false;
    return true;
  }

  template <typename T>
  Tensor<T> cast() const {
    auto out = Tensor<T>::zeros(p->shape);
    for (int64_t i = 0; i < numel(); ++i) out.data()[i] = static_cast<T>(p->v[i]);
    return out;
  }

  std::shared_ptr<TensorImpl<S>> p;
};

// ---------------------------------------------------------------------------
// Tape

namespace detail {
inline thread_local int nograd_depth = 0;
}

struct NoGradGuard {
  NoGradGuard() { ++detail::nograd_depth; }
  ~NoGradGuard() { --detail::nograd_depth; }
  NoGradGuard(const NoGradGuard&) = delete;
};
inline bool grad_enabled() { return detail::nograd_depth == 0; }

template <typename S>
struct TapeEntry {
  std::shared_ptr<TensorImpl<S>> out;
  std::vector<std::shared_ptr<TensorImpl<S>>> parents;
  // Returns one gradient per parent; an undefined Tensor means "no gradient".
  // `need[j]` tells the op whether parent j's gradient will be consumed, so
  // expensive branches can be skipped.
  std::function<std::vector<Tensor<S>>(const Tensor<S>&, const std::vector<char>&)> backward;
};

// Ordered record of executed differentiable operations. Entries are appended
// in execution order, so parents always precede consumers; reverse traversal
// is a valid reverse-topological sweep, including entries appended *during*
// a create_graph backward (they only ever reference earlier entries).
template <typename S>
class Tape {
 public:
  static Tape& active() {
    static thread_local Tape tape;
    return tape;
  }

  size_t size() const { return entries_.size(); }
  void clear() { entries_.clear(); }
  // Drops entries from `mark` on. Tensors produced by dropped entries must
  // not be used as inputs afterwards.
  void truncate(size_t mark) {
    if (mark < entries_.size()) entries_.resize(mark);
  }
  const TapeEntry<S>& entry(size_t i) const { return entries_[i]; }

  void record(const Tensor<S>& out, std::vector<Tensor<S>> parents,
              std::function<std::vector<Tensor<S>>(const Tensor<S>&, const std::vector<char>&)>
                  backward) {
    TapeEntry<S> e;
    e.out = out.p;
    e.parents.reserve(parents.size());
    for (auto& t : parents) e.parents.push_back(t.p);
    e.backward = std::move(backward);
    out.p->tape_id = static_cast<int64_t>(entries_.size());
    out.p->requires_grad = true;
    entries_.push_back(std::move(e));
  }

  // Gradients of a scalar loss w.r.t. `wrt`, without touching leaf .grad.
  // With create_graph the returned tensors are themselves differentiable.
  std::vector<Tensor<S>> grad(const Tensor<S>& loss, const std::vector<Tensor<S>>& wrt,
                              bool create_graph = false) {
    std::unordered_set<TensorImpl<S>*> targets;
    for (const auto& w : wrt) targets.insert(w.p.get());
    auto gmap = sweep(loss, &targets, create_graph);
    std::vector<Tensor<S>> out;
    out.reserve(wrt.size());
    for (const auto& w : wrt) {
      auto it = gmap.find(w.p.get());
      out.push_back(it != gmap.end() ? it->second : Tensor<S>::zeros(w.shape()));
    }
    return out;
  }

  // Accumulates dLoss/dLeaf into every requires_grad leaf. Repeated calls
  // accumulate until zero_grad.
  void backward(const Tensor<S>& loss, bool create_graph = false) {
    auto gmap = sweep(loss, nullptr, create_graph);
    for (auto& [impl, g] : gmap) {
      if (impl->tape_id >= 0 || !impl->requires_grad) continue;
      if (impl->grad.empty()) impl->grad.assign(impl->v.size(), S(0));
      const S* src = g.data();
      for (size_t i = 0; i < impl->grad.size(); ++i) impl->grad[i] += src[i];
    }
  }

 private:
  // targets==nullptr means "all requires_grad leaves".
  std::unordered_map<TensorImpl<S>*, Tensor<S>> sweep(
      const Tensor<S>& loss, const std::unordered_set<TensorImpl<S>*>* targets,
      bool create_graph) {
    if (!loss.defined()) throw TapeError("backward on undefined tensor");
    if (loss.numel() != 1) throw TapeError("loss must be a scalar, got " + shape_str(loss.shape()));
    if (loss.p->tape_id < 0) throw TapeError("loss is detached from the tape");
    const int64_t last = loss.p->tape_id;
    if (last >= static_cast<int64_t>(entries_.size()))
      throw TapeError("loss was produced on a cleared tape");

    // Mark entries lying on a path from a target up to the loss.
    std::vector<char> needed(static_cast<size_t>(last) + 1, 0);
    for (int64_t i = 0; i <= last; ++i) {
      for (const auto& par : entries_[static_cast<size_t>(i)].parents) {
        bool hit = false;
        if (targets && targets->count(par.get())) hit = true;
        if (!hit && par->tape_id >= 0 && par->tape_id <= last)
          hit = needed[static_cast<size_t>(par->tape_id)] != 0;
        if (!hit && !targets) hit = par->tape_id < 0 && par->requires_grad;
        if (hit) {
          needed[static_cast<size_t>(i)] = 1;
          break;
        }
      }
    }
    // The loss node itself always participates (covers wrt == loss-producing
    // chains even if no target sits upstream; sweep then yields zeros).
    std::unordered_map<TensorImpl<S>*, Tensor<S>> gmap;
    gmap.emplace(loss.p.get(), Tensor<S>::full({1}, S(1)));

    for (int64_t e = last; e >= 0; --e) {
      if (!needed[static_cast<size_t>(e)]) continue;
      auto& entry = entries_[static_cast<size_t>(e)];
      auto it = gmap.find(entry.out.get());
      if (it == gmap.end()) continue;
      Tensor<S> gout = it->second;
      std::vector<char> need(entry.parents.size(), 0);
      for (size_t j = 0; j < entry.parents.size(); ++j) {
        const auto& par = entry.parents[j];
        if (targets && targets->count(par.get())) need[j] = 1;
        if (par->tape_id >= 0 && par->tape_id <= last &&
            needed[static_cast<size_t>(par->tape_id)])
          need[j] = 1;
        if (!targets && par->tape_id < 0 && par->requires_grad) need[j] = 1;
      }
      std::vector<Tensor<S>> pgrads;
      {
        std::unique_ptr<NoGradGuard> guard;
        if (!create_graph) guard = std::make_unique<NoGradGuard>();
        pgrads = entry.backward(gout, need);
      }
      if (pgrads.size() != entry.parents.size())
        throw TapeError("backward returned wrong number of gradients");
      for (size_t j = 0; j < pgrads.size(); ++j) {
        if (!need[j] || !pgrads[j].defined()) continue;
        auto& par = entry.parents[j];
        if (pgrads[j].shape() != par->shape)
          throw TapeError("gradient shape mismatch: " + shape_str(pgrads[j].shape()) + " vs " +
                          shape_str(par->shape));
        auto git = gmap.find(par.get());
        if (git == gmap.end()) {
          gmap.emplace(par.get(), pgrads[j]);
        } else {
          git->second = accumulate(git->second, pgrads[j], create_graph);
        }
      }
      // Drop consumed intermediates unless the caller asked for them.
      if (!targets || !targets->count(entry.out.get())) gmap.erase(entry.out.get());
    }
    return gmap;
  }

  static Tensor<S> accumulate(const Tensor<S>& a, const Tensor<S>& b, bool create_graph);

  std::vector<TapeEntry<S>> entries_;
};

}  // namespace d2o
