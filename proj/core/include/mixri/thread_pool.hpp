#pragma once

#include <functional>
#include <vector>

namespace mixri {

/// Worker count: MIXRI_THREADS env var if set, else hardware concurrency.
int worker_count();

/// Runs fn(i) for i in [0, n). Each task writes only its own output slot, so
/// results are identical for any worker count.
void parallel_for(int64_t n, const std::function<void(int64_t)>& fn);

}  // namespace mixri
