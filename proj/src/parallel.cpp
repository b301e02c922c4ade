#include "polynext/parallel.hpp"

#include <algorithm>
#include <atomic>
#include <condition_variable>
#include <mutex>
#include <thread>
#include <vector>

namespace polynext {

namespace {

std::atomic<int> g_threads{0};

thread_local bool t_inside_job = false;

// Lazily started pool; workers sleep between jobs. One job at a time;
// nested parallel_for calls run inline on the calling thread.
class Pool {
 public:
  static Pool& instance() {
    static Pool* pool = new Pool();  // leaked: workers are detached and may outlive statics
    return *pool;
  }

  void run(int64_t n, const std::function<void(int64_t, int64_t)>& fn, int workers) {
    ensure_started(workers - 1);
    int total = std::min<int>(workers, 1 + static_cast<int>(threads_.size()));
    int64_t chunk = (n + total - 1) / total;
    {
      std::lock_guard<std::mutex> lk(m_);
      job_fn_ = &fn;
      job_n_ = n;
      job_chunk_ = chunk;
      job_total_ = total;
      pending_ = total - 1;
      ++epoch_;
    }
    cv_.notify_all();
    // Caller handles chunk 0.
    int64_t end0 = std::min<int64_t>(chunk, n);
    if (end0 > 0) fn(0, end0);
    std::unique_lock<std::mutex> lk(m_);
    done_cv_.wait(lk, [&] { return pending_ == 0; });
    job_fn_ = nullptr;
  }

 private:
  void ensure_started(int extra) {
    std::lock_guard<std::mutex> lk(start_m_);
    while (static_cast<int>(threads_.size()) < extra) {
      int idx = static_cast<int>(threads_.size()) + 1;
      threads_.emplace_back([this, idx] { worker(idx); });
      threads_.back().detach();
    }
  }

  void worker(int idx) {
    t_inside_job = true;  // nested parallel_for from a worker runs inline
    uint64_t seen = 0;
    for (;;) {
      const std::function<void(int64_t, int64_t)>* fn = nullptr;
      int64_t n = 0, chunk = 0;
      bool participate = false;
      {
        std::unique_lock<std::mutex> lk(m_);
        cv_.wait(lk, [&] { return epoch_ != seen; });
        seen = epoch_;
        participate = idx < job_total_;
        if (participate) {
          fn = job_fn_;
          n = job_n_;
          chunk = job_chunk_;
        }
      }
      if (!participate) continue;
      int64_t begin = chunk * idx;
      int64_t end = std::min<int64_t>(begin + chunk, n);
      if (fn && begin < end) (*fn)(begin, end);
      {
        std::lock_guard<std::mutex> lk(m_);
        if (--pending_ == 0) done_cv_.notify_all();
      }
    }
  }

  std::mutex m_, start_m_;
  std::condition_variable cv_, done_cv_;
  std::vector<std::thread> threads_;
  const std::function<void(int64_t, int64_t)>* job_fn_ = nullptr;
  int64_t job_n_ = 0, job_chunk_ = 0;
  int job_total_ = 1;
  int pending_ = 0;
  uint64_t epoch_ = 0;
};

}  // namespace

void set_num_threads(int n) { g_threads.store(n); }

int num_threads() {
  int n = g_threads.load();
  if (n > 0) return n;
  unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

void parallel_for_ranges(int64_t n, const std::function<void(int64_t, int64_t)>& fn) {
  if (n <= 0) return;
  int workers = num_threads();
  if (workers <= 1 || n < 2 || t_inside_job) {
    fn(0, n);
    return;
  }
  t_inside_job = true;
  struct Reset {
    ~Reset() { t_inside_job = false; }
  } reset;
  Pool::instance().run(n, fn, workers);
}

void parallel_for(int64_t n, const std::function<void(int64_t)>& fn) {
  parallel_for_ranges(n, [&](int64_t b, int64_t e) {
    for (int64_t i = b; i < e; ++i) fn(i);
  });
}

}  // namespace polynext
