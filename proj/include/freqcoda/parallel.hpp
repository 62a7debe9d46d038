#pragma once

#include <cstddef>
#include <functional>

namespace freqcoda {

// Worker count: hardware concurrency capped by FREQCODA_THREADS (>= 1).
std::size_t thread_budget();

// Runs fn(i) for i in [0, n). Each index is processed exactly once; callers
// only pass work whose iterations write disjoint outputs, so results do not
// depend on the worker count.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace freqcoda
