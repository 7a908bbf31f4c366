#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <exception>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace unifed {

// Worker count for parallel_for. Outputs never depend on it: tasks write to
// disjoint slots and callers reduce partial results in index order.
inline std::atomic<int>& thread_count_slot() {
  static std::atomic<int> n{1};
  return n;
}

inline int thread_count() { return thread_count_slot().load(); }

inline void set_thread_count(int n) { thread_count_slot().store(n < 1 ? 1 : n); }

inline void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn) {
  const std::size_t workers =
      std::min<std::size_t>(static_cast<std::size_t>(thread_count()), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::exception_ptr err;
  std::mutex err_mu;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      const std::size_t lo = w * n / workers;
      const std::size_t hi = (w + 1) * n / workers;
      try {
        for (std::size_t i = lo; i < hi; ++i) fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(err_mu);
        if (!err) err = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  if (err) std::rethrow_exception(err);
}

}  // namespace unifed
