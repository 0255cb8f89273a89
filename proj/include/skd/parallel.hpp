#pragma once

#include <cstddef>
#include <functional>

namespace skd {

// Worker cap: SKD_THREADS if set and positive, else hardware concurrency.
int thread_budget();

// Calls fn(i) for i in [0, n) on up to `threads` workers. Work is split into
// contiguous chunks, so results written by index are order-independent.
// The first exception thrown by any worker is rethrown after all join.
void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn);

}  // namespace skd
