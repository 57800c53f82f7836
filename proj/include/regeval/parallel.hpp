#pragma once

#include <cstdint>
#include <functional>

namespace regeval {

/// Number of threads used by data-parallel voxel loops on the calling thread.
/// Defaults to the REGEVAL_THREADS environment variable (or 1).
int inner_threads();
void set_inner_threads(int n);

/// Worker count for pair-level pools, from REGEVAL_THREADS (hardware
/// concurrency when unset).
int worker_threads();

/// Runs body(begin, end) over disjoint chunks of [0, n). Each index is visited
/// exactly once; bodies must only write to their own indices.
void parallel_for(std::int64_t n, const std::function<void(std::int64_t, std::int64_t)>& body);

/// Deterministic sum of f(i) over [0, n): partial sums over fixed-size blocks,
/// combined in block order, independent of thread count.
double ordered_sum(std::int64_t n, const std::function<double(std::int64_t)>& f);

}  // namespace regeval
