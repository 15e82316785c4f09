#pragma once

#include <cstdint>
#include <functional>

namespace nvrl {

// Number of worker threads used by parallel_for. Defaults to the hardware
// count (capped at 16); override with the NVRL_THREADS environment variable.
int thread_count();

// Runs fn(i) for i in [0, n). Work is split into contiguous chunks, one per
// worker, and every index is computed entirely inside one task, so results
// are bit-identical to the sequential loop for any thread count.
void parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& chunk_fn);

inline void parallel_for_each(int64_t n, const std::function<void(int64_t)>& fn) {
  parallel_for(n, [&](int64_t lo, int64_t hi) {
    for (int64_t i = lo; i < hi; ++i) fn(i);
  });
}

}  // namespace nvrl
