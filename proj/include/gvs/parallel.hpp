#pragma once

// Deterministic data-parallel loop. Work is split into contiguous index
// blocks; every index is processed by exactly one worker with the same
// per-index code path as the serial loop, so results are bit-identical for
// any thread count.

#include <cstdlib>
#include <functional>
#include <thread>
#include <vector>

namespace gvs {

inline int default_threads() {
  if (const char* env = std::getenv("GVS_THREADS")) {
    int n = std::atoi(env);
    if (n >= 1) return n;
  }
  unsigned hw = std::thread::hardware_concurrency();
  return hw ? static_cast<int>(hw) : 1;
}

// Global knob used by the parallel kernels; the CLI sets it from --threads.
inline int& thread_count() {
  static int n = default_threads();
  return n;
}

template <class Body>
void parallel_for(std::size_t n, const Body& body, int threads = 0) {
  if (threads <= 0) threads = thread_count();
  if (threads <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(threads), n);
  std::vector<std::thread> pool;
  pool.reserve(workers);
  std::size_t chunk = (n + workers - 1) / workers;
  for (std::size_t w = 0; w < workers; ++w) {
    std::size_t lo = w * chunk;
    std::size_t hi = std::min(n, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([lo, hi, &body] {
      for (std::size_t i = lo; i < hi; ++i) body(i);
    });
  }
  for (auto& t : pool) t.join();
}

}  // namespace gvs
