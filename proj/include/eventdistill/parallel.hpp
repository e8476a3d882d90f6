#pragma once

#include <cstddef>
#include <functional>

namespace eventdistill {

// Worker count: explicit override if set, else EVENTDISTILL_THREADS (0 = auto).
std::size_t worker_count();

// Overrides the environment; 0 restores environment/auto behaviour.
void set_worker_count(std::size_t workers);

// Runs fn(i) for i in [0, n). Each index is handled by exactly one worker, so
// callers that write results into slot i and reduce afterwards in index order
// stay deterministic regardless of the worker count.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace eventdistill
