#pragma once

#include <cstddef>
#include <functional>

namespace engram_ar {

/// Worker count: `requested` if positive, else the hardware concurrency;
/// either way capped by ENGRAM_AR_THREADS when that is set.
int resolve_threads(int requested = 0);

/// Runs fn(i) for i in [0, n) on up to `threads` workers. Work items are
/// independent; the first exception thrown by any item is rethrown.
void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn);

}  // namespace engram_ar
