#pragma once

#include <cstddef>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace steerkit {

/// Runs fn(i) for i in [0, n) across a fixed thread pool. Work per index
/// must be independent; results should be written to preallocated slots so
/// the outcome is deterministic regardless of scheduling. The first thrown
/// exception is rethrown on the caller thread.
template <typename Fn>
void parallel_for(std::size_t n, int threads, Fn&& fn) {
  if (n == 0) return;
  std::size_t pool = threads > 0 ? std::size_t(threads)
                                 : std::size_t(std::thread::hardware_concurrency());
  if (pool == 0) pool = 1;
  pool = std::min(pool, n);
  if (pool == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }

  std::mutex error_mutex;
  std::exception_ptr error;
  std::vector<std::thread> workers;
  workers.reserve(pool);
  for (std::size_t w = 0; w < pool; ++w) {
    workers.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += pool) fn(i);
      } catch (...) {
        std::lock_guard lock(error_mutex);
        if (!error) error = std::current_exception();
      }
    });
  }
  for (auto& t : workers) t.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace steerkit
