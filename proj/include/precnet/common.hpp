#pragma once

#include <charconv>
#include <condition_variable>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <mutex>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace precnet {

// Error taxonomy shared by the library and the CLI. The CLI maps these to
// process exit codes: validation 2, numeric 3, I/O 4.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ValidationError : Error {
  using Error::Error;
};
struct NumericError : Error {
  using Error::Error;
};
struct IoError : Error {
  using Error::Error;
};

namespace detail {
[[noreturn]] inline void fail_validation(const std::string& msg) { throw ValidationError(msg); }
}  // namespace detail

inline void check(bool cond, const std::string& msg) {
  if (!cond) detail::fail_validation(msg);
}

// Counter-based PRNG (splitmix64). Chosen over std::mt19937 + distributions
// because the standard distributions are implementation-defined; this stream
// is bit-identical on every platform and its state is a single u64 that can
// be persisted in checkpoints.
class SplitMix64 {
 public:
  explicit SplitMix64(std::uint64_t seed = 0) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1).
  double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double next_real(double lo, double hi) { return lo + (hi - lo) * next_double(); }

  // Uniform in [0, n). Lemire's multiply-shift; slight bias is irrelevant at
  // the sample counts used here and the result is platform-independent.
  std::uint64_t next_index(std::uint64_t n) {
    return static_cast<std::uint64_t>(
        (static_cast<unsigned __int128>(next_u64()) * n) >> 64);
  }

  std::uint64_t state() const { return state_; }
  void set_state(std::uint64_t s) { state_ = s; }

 private:
  std::uint64_t state_;
};

// Shared worker pool for data-parallel loops inside tensor ops. Every index
// is processed by exactly one worker with a fixed interior order, so results
// are bit-identical to the sequential loop for any thread count.
class ThreadPool {
 public:
  static ThreadPool& instance() {
    static ThreadPool pool;
    return pool;
  }

  int thread_count() const { return n_threads_; }

  // fn(begin, end) over [0, n); serialized against concurrent callers.
  void parallel_for(std::int64_t n, const std::function<void(std::int64_t, std::int64_t)>& fn) {
    if (n <= 0) return;
    if (n_threads_ == 1 || n == 1) {
      fn(0, n);
      return;
    }
    std::lock_guard<std::mutex> region(region_mutex_);
    const std::int64_t chunks = std::min<std::int64_t>(n_threads_, n);
    const std::int64_t per = (n + chunks - 1) / chunks;
    {
      std::unique_lock<std::mutex> lk(mutex_);
      task_ = &fn;
      next_chunk_ = 0;
      total_chunks_ = chunks;
      chunk_size_ = per;
      total_n_ = n;
      pending_ = chunks;
      ++generation_;
    }
    cv_work_.notify_all();
    run_chunks(fn);
    std::unique_lock<std::mutex> lk(mutex_);
    cv_done_.wait(lk, [&] { return pending_ == 0; });
    task_ = nullptr;
  }

  ~ThreadPool() {
    {
      std::unique_lock<std::mutex> lk(mutex_);
      stop_ = true;
    }
    cv_work_.notify_all();
    for (auto& t : workers_) t.join();
  }

 private:
  ThreadPool() {
    n_threads_ = 1;
    if (const char* env = std::getenv("PRECODER_THREADS")) {
      int v = 0;
      auto [p, ec] = std::from_chars(env, env + std::string(env).size(), v);
      (void)p;
      if (ec == std::errc() && v >= 1) n_threads_ = v;
    } else {
      unsigned hw = std::thread::hardware_concurrency();
      n_threads_ = hw == 0 ? 1 : static_cast<int>(hw);
    }
    for (int i = 1; i < n_threads_; ++i) {
      workers_.emplace_back([this] { worker_loop(); });
    }
  }

  void run_chunks(const std::function<void(std::int64_t, std::int64_t)>& fn) {
    for (;;) {
      std::int64_t c;
      {
        std::unique_lock<std::mutex> lk(mutex_);
        if (next_chunk_ >= total_chunks_) break;
        c = next_chunk_++;
      }
      const std::int64_t b = c * chunk_size_;
      const std::int64_t e = std::min<std::int64_t>(b + chunk_size_, total_n_);
      if (b < e) fn(b, e);
      {
        std::unique_lock<std::mutex> lk(mutex_);
        if (--pending_ == 0) cv_done_.notify_all();
      }
    }
  }

  void worker_loop() {
    std::uint64_t seen = 0;
    for (;;) {
      const std::function<void(std::int64_t, std::int64_t)>* fn;
      {
        std::unique_lock<std::mutex> lk(mutex_);
        cv_work_.wait(lk, [&] { return stop_ || (task_ != nullptr && generation_ != seen); });
        if (stop_) return;
        seen = generation_;
        fn = task_;
      }
      for (;;) {
        std::int64_t c;
        {
          std::unique_lock<std::mutex> lk(mutex_);
          if (task_ != fn || next_chunk_ >= total_chunks_) break;
          c = next_chunk_++;
        }
        const std::int64_t b = c * chunk_size_;
        const std::int64_t e = std::min<std::int64_t>(b + chunk_size_, total_n_);
        if (b < e) (*fn)(b, e);
        {
          std::unique_lock<std::mutex> lk(mutex_);
          if (--pending_ == 0) cv_done_.notify_all();
        }
      }
    }
  }

  int n_threads_ = 1;
  std::vector<std::thread> workers_;
  std::mutex mutex_;
  std::mutex region_mutex_;
  std::condition_variable cv_work_;
  std::condition_variable cv_done_;
  const std::function<void(std::int64_t, std::int64_t)>* task_ = nullptr;
  std::int64_t next_chunk_ = 0;
  std::int64_t total_chunks_ = 0;
  std::int64_t chunk_size_ = 0;
  std::int64_t total_n_ = 0;
  int pending_ = 0;
  std::uint64_t generation_ = 0;
  bool stop_ = false;
};

// Shortest round-trip decimal form; used for CSV and JSON emission so that
// identical floats always print identically.
template <typename T>
std::string format_value(T v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  if (ec != std::errc()) return "0";
  return std::string(buf, p);
}

}  // namespace precnet
