#pragma once

#include <cstddef>
#include <functional>

namespace vqg {

// Worker count for per-item parallel loops: VQG_THREADS when set to a
// positive integer, otherwise the hardware concurrency.
std::size_t worker_count();

// Runs fn(i) for i in [0, n). Each index is visited exactly once; callers
// write results by index so the outcome does not depend on scheduling.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace vqg
