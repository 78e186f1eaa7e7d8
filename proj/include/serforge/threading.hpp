#pragma once

#include <cstdlib>
#include <thread>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace serforge {

// Worker pool size: SER_FORGE_THREADS if set, else hardware concurrency.
inline int max_threads() {
  static const int cached = [] {
    if (const char* env = std::getenv("SER_FORGE_THREADS")) {
      int v = std::atoi(env);
      if (v > 0) return v;
    }
    unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : static_cast<int>(hw);
  }();
  return cached;
}

// Work below this many scalar ops is not worth fanning out.
inline constexpr std::size_t kParallelGrain = 1u << 21;

// Splits [0, n) across the pool. Every index must write only its own
// outputs and accumulate in its own fixed order, so the partitioning can
// never change result bits.
template <typename Fn>
inline void parallel_for(std::size_t n, std::size_t total_work, Fn&& fn) {
#ifdef _OPENMP
  if (max_threads() > 1 && n > 1 && total_work >= kParallelGrain) {
    const long long nn = static_cast<long long>(n);
#pragma omp parallel for schedule(static) num_threads(max_threads())
    for (long long i = 0; i < nn; ++i) fn(static_cast<std::size_t>(i));
    return;
  }
#endif
  for (std::size_t i = 0; i < n; ++i) fn(i);
}

}  // namespace serforge
