#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <exception>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace detflow {

/// Number of worker threads to use when the caller does not say: the hardware
/// count, capped at 8.
inline unsigned default_workers() {
  const unsigned hw = std::thread::hardware_concurrency();
  return std::clamp(hw, 1u, 8u);
}

// Runs fn(0) .. fn(n_blocks-1), each exactly once, on up to `workers`
// threads.  Blocks must write only block-local state; reductions over the
// per-block results happen on the caller side in block order, which is what
// makes results independent of the worker count.
inline void parallel_blocks(std::size_t n_blocks, unsigned workers,
                            const std::function<void(std::size_t)>& fn) {
  if (workers == 0) workers = default_workers();
  if (workers <= 1 || n_blocks <= 1) {
    for (std::size_t b = 0; b < n_blocks; ++b) fn(b);
    return;
  }
  workers = static_cast<unsigned>(std::min<std::size_t>(workers, n_blocks));
  std::atomic<std::size_t> next{0};
  std::atomic<bool> failed{false};
  std::exception_ptr first_error;
  std::mutex err_mutex;

  auto body = [&] {
    while (!failed.load(std::memory_order_relaxed)) {
      const std::size_t b = next.fetch_add(1, std::memory_order_relaxed);
      if (b >= n_blocks) return;
      try {
        fn(b);
      } catch (...) {
        std::lock_guard<std::mutex> lock(err_mutex);
        if (!first_error) first_error = std::current_exception();
        failed.store(true, std::memory_order_relaxed);
        return;
      }
    }
  };

  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (unsigned w = 0; w < workers; ++w) pool.emplace_back(body);
  for (auto& t : pool) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

}  // namespace detflow
