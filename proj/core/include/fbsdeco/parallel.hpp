#pragma once

#include <cstddef>
#include <functional>

namespace fbsdeco {

// Worker cap: FBSDE_CO_THREADS when set (>=1), hardware concurrency otherwise.
std::size_t max_workers();

// Runs fn(0..count-1) across up to max_workers() threads. Each index is
// processed exactly once; exceptions propagate from the first failing index.
void parallel_for_index(std::size_t count,
                        const std::function<void(std::size_t)>& fn);

}  // namespace fbsdeco
