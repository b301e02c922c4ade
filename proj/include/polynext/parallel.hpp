#pragma once

#include <cstdint>
#include <functional>

namespace polynext {

/// Global worker count. 0 (default) means hardware concurrency; 1 forces the
/// calling thread only (used by --deterministic, though results are
/// thread-count independent anyway: every element is written by exactly one
/// worker with a fixed per-element summation order).
void set_num_threads(int n);
int num_threads();

/// Runs fn(i) for i in [0, n). Static contiguous partition per worker.
/// fn must write disjoint outputs per index.
void parallel_for(int64_t n, const std::function<void(int64_t)>& fn);

/// Range flavor: fn(begin, end) per contiguous chunk.
void parallel_for_ranges(int64_t n, const std::function<void(int64_t, int64_t)>& fn);

}  // namespace polynext
