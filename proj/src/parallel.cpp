#include "faxbev/parallel.hpp"

#include <algorithm>
#include <atomic>
#include <condition_variable>
#include <cstdlib>
#include <mutex>
#include <thread>
#include <vector>

namespace faxbev {

namespace {

int default_workers() {
  int n = static_cast<int>(std::thread::hardware_concurrency());
  if (n <= 0) n = 1;
  if (const char* env = std::getenv("FAXBEV_THREADS")) {
    int cap = std::atoi(env);
    if (cap > 0) n = std::min(n, cap);
  }
  return n;
}

std::atomic<int> g_workers{0};  // 0 = uninitialized

// Minimal persistent pool. The calling thread executes chunk 0 itself and the
// helpers pull remaining chunks off an atomic counter.
class Pool {
 public:
  explicit Pool(int helpers) {
    for (int i = 0; i < helpers; ++i) {
      threads_.emplace_back([this] { worker_loop(); });
    }
  }

  ~Pool() {
    {
      std::lock_guard<std::mutex> lk(m_);
      stop_ = true;
    }
    cv_.notify_all();
    for (auto& t : threads_) t.join();
  }

  void run(int64_t n, int nchunks, const std::function<void(int64_t, int64_t)>& fn) {
    {
      std::lock_guard<std::mutex> lk(m_);
      job_ = &fn;
      total_ = n;
      nchunks_ = nchunks;
      next_chunk_.store(1);
      remaining_ = nchunks - 1;
      ++epoch_;
    }
    if (nchunks > 1) cv_.notify_all();
    run_chunk(0);
    if (nchunks > 1) {
      std::unique_lock<std::mutex> lk(m_);
      cv_done_.wait(lk, [this] { return remaining_ == 0; });
    }
    std::lock_guard<std::mutex> lk(m_);
    job_ = nullptr;
  }

 private:
  void run_chunk(int c) {
    int64_t per = (total_ + nchunks_ - 1) / nchunks_;
    int64_t begin = per * c;
    int64_t end = std::min<int64_t>(total_, begin + per);
    if (begin < end) (*job_)(begin, end);
  }

  void worker_loop() {
    uint64_t seen = 0;
    for (;;) {
      {
        std::unique_lock<std::mutex> lk(m_);
        cv_.wait(lk, [&] { return stop_ || epoch_ != seen; });
        if (stop_) return;
        seen = epoch_;
      }
      for (;;) {
        int c = next_chunk_.fetch_add(1);
        if (c >= nchunks_) break;
        run_chunk(c);
        std::lock_guard<std::mutex> lk(m_);
        if (--remaining_ == 0) cv_done_.notify_one();
      }
      // Chunks may all have been claimed before this worker woke; account
      // for the no-op pass so remaining_ still reaches zero elsewhere.
    }
  }

  std::vector<std::thread> threads_;
  std::mutex m_;
  std::condition_variable cv_, cv_done_;
  const std::function<void(int64_t, int64_t)>* job_ = nullptr;
  int64_t total_ = 0;
  int nchunks_ = 0;
  std::atomic<int> next_chunk_{0};
  int remaining_ = 0;
  uint64_t epoch_ = 0;
  bool stop_ = false;
};

Pool* pool() {
  static Pool p(worker_count() - 1);
  return &p;
}

}  // namespace

int worker_count() {
  int n = g_workers.load();
  if (n == 0) {
    n = default_workers();
    g_workers.store(n);
  }
  return n;
}

void set_worker_count(int n) { g_workers.store(n < 1 ? 1 : n); }

void parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& fn) {
  if (n <= 0) return;
  int workers = worker_count();
  if (workers <= 1 || n < 2048) {
    fn(0, n);
    return;
  }
  int nchunks = static_cast<int>(std::min<int64_t>(workers, n));
  pool()->run(n, nchunks, fn);
}

}  // namespace faxbev
