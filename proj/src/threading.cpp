#include "nvrl/threading.hpp"

#include <atomic>
#include <condition_variable>
#include <cstdlib>
#include <mutex>
#include <thread>
#include <vector>

namespace nvrl {

namespace {

int detect_threads() {
  if (const char* env = std::getenv("NVRL_THREADS")) {
    int v = std::atoi(env);
    if (v >= 1) return v > 64 ? 64 : v;
  }
  unsigned hc = std::thread::hardware_concurrency();
  if (hc == 0) hc = 1;
  return hc > 16 ? 16 : (int)hc;
}

// Persistent pool; spawning threads per conv call is too costly inside the
// training loop.
class Pool {
 public:
  Pool() : nthreads_(detect_threads()) {
    for (int i = 1; i < nthreads_; ++i) {
      workers_.emplace_back([this, i] { worker_loop(i); });
    }
  }

  ~Pool() {
    {
      std::lock_guard<std::mutex> lk(mu_);
      stop_ = true;
    }
    cv_.notify_all();
    for (auto& t : workers_) t.join();
  }

  int size() const { return nthreads_; }

  void run(int64_t n, const std::function<void(int64_t, int64_t)>& fn) {
    if (n <= 0) return;
    int parts = nthreads_;
    if ((int64_t)parts > n) parts = (int)n;
    if (parts == 1) {
      fn(0, n);
      return;
    }
    {
      std::lock_guard<std::mutex> lk(mu_);
      job_fn_ = &fn;
      job_n_ = n;
      job_parts_ = parts;
      pending_.store(parts - 1, std::memory_order_relaxed);
      ++epoch_;
    }
    cv_.notify_all();
    run_part(0);
    while (pending_.load(std::memory_order_acquire) != 0) std::this_thread::yield();
    std::lock_guard<std::mutex> lk(mu_);
    job_fn_ = nullptr;
  }

 private:
  void run_part(int part);

  void worker_loop(int index) {
    uint64_t seen = 0;
    for (;;) {
      std::unique_lock<std::mutex> lk(mu_);
      cv_.wait(lk, [&] { return stop_ || epoch_ != seen; });
      if (stop_) return;
      seen = epoch_;
      bool mine = index < job_parts_;
      lk.unlock();
      if (mine) {
        run_part(index);
        pending_.fetch_sub(1, std::memory_order_release);
      }
    }
  }

  const int nthreads_;
  std::vector<std::thread> workers_;
  std::mutex mu_;
  std::condition_variable cv_;
  bool stop_ = false;
  uint64_t epoch_ = 0;
  const std::function<void(int64_t, int64_t)>* job_fn_ = nullptr;
  int64_t job_n_ = 0;
  int job_parts_ = 1;
  std::atomic<int> pending_{0};
};

thread_local bool in_parallel_region = false;

void Pool::run_part(int part) {
  int64_t chunk = (job_n_ + job_parts_ - 1) / job_parts_;
  int64_t lo = part * chunk;
  int64_t hi = lo + chunk;
  if (hi > job_n_) hi = job_n_;
  if (lo < hi) {
    bool prev = in_parallel_region;
    in_parallel_region = true;  // nested parallel_for runs inline
    (*job_fn_)(lo, hi);
    in_parallel_region = prev;
  }
}

Pool& pool() {
  static Pool p;
  return p;
}

}  // namespace

int thread_count() { return pool().size(); }

void parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& fn) {
  if (n <= 0) return;
  // Nested calls run inline; the pool is not reentrant.
  if (in_parallel_region) {
    fn(0, n);
    return;
  }
  in_parallel_region = true;
  pool().run(n, fn);
  in_parallel_region = false;
}

}  // namespace nvrl
