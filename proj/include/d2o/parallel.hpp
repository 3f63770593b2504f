#pragma once

#include <condition_variable>
#include <cstdlib>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace d2o {

// Fixed-size worker pool. Work is always split into exactly nthreads()
// contiguous chunks so that floating-point results never depend on
// scheduling; reductions combine per-chunk partials in chunk order.
class ThreadPool {
 public:
  static ThreadPool& instance() {
    static ThreadPool pool;
    return pool;
  }

  int nthreads() const { return static_cast<int>(workers_.size()) + 1; }

  // fn(chunk_index, lo, hi) over [0, n). Chunk 0 runs on the caller.
  void run_chunked(int64_t n, const std::function<void(int, int64_t, int64_t)>& fn) {
    int nt = nthreads();
    if (n <= 0) return;
    int64_t chunk = (n + nt - 1) / nt;
    {
      std::unique_lock<std::mutex> lk(mu_);
      job_ = &fn;
      job_n_ = n;
      job_chunk_ = chunk;
      pending_ = 0;
      for (int t = 1; t < nt; ++t) {
        int64_t lo = t * chunk;
        if (lo < n) ++pending_;
      }
      ++epoch_;
      cv_.notify_all();
    }
    int64_t hi0 = std::min<int64_t>(chunk, n);
    if (hi0 > 0) fn(0, 0, hi0);
    std::unique_lock<std::mutex> lk(mu_);
    done_cv_.wait(lk, [&] { return pending_ == 0; });
    job_ = nullptr;
  }

 private:
  ThreadPool() {
    int nt = default_threads();
    for (int t = 1; t < nt; ++t) {
      workers_.emplace_back([this, t] { worker_loop(t); });
    }
  }
  ~ThreadPool() {
    {
      std::unique_lock<std::mutex> lk(mu_);
      stop_ = true;
      ++epoch_;
      cv_.notify_all();
    }
    for (auto& w : workers_) w.join();
  }

  static int default_threads() {
    if (const char* env = std::getenv("D2O_THREADS")) {
      int v = std::atoi(env);
      if (v >= 1) return v;
    }
    unsigned hc = std::thread::hardware_concurrency();
    return hc == 0 ? 1 : static_cast<int>(hc);
  }

  void worker_loop(int tid) {
    uint64_t seen = 0;
    for (;;) {
      const std::function<void(int, int64_t, int64_t)>* job = nullptr;
      int64_t n = 0, chunk = 0;
      {
        std::unique_lock<std::mutex> lk(mu_);
        cv_.wait(lk, [&] { return epoch_ != seen; });
        seen = epoch_;
        if (stop_) return;
        job = job_;
        n = job_n_;
        chunk = job_chunk_;
      }
      if (!job) continue;
      int64_t lo = tid * chunk;
      int64_t hi = std::min<int64_t>(lo + chunk, n);
      if (lo < hi) (*job)(tid, lo, hi);
      {
        std::unique_lock<std::mutex> lk(mu_);
        if (lo < n && --pending_ == 0) done_cv_.notify_all();
      }
    }
  }

  std::vector<std::thread> workers_;
  std::mutex mu_;
  std::condition_variable cv_, done_cv_;
  const std::function<void(int, int64_t, int64_t)>* job_ = nullptr;
  int64_t job_n_ = 0, job_chunk_ = 0;
  int pending_ = 0;
  uint64_t epoch_ = 0;
  bool stop_ = false;
};

// Elementwise helper; falls back to serial below the grain size.
inline void parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& fn,
                         int64_t grain = 1 << 14) {
  if (n < grain || ThreadPool::instance().nthreads() == 1) {
    fn(0, n);
    return;
  }
  ThreadPool::instance().run_chunked(n, [&](int, int64_t lo, int64_t hi) { fn(lo, hi); });
}

}  // namespace d2o
