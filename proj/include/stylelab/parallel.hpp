#pragma once

#include <cstddef>
#include <functional>

#include "stylelab/precision.hpp"

namespace stylelab {
STYLELAB_BEGIN_PRECISION

// Worker count: STYLELAB_THREADS if set to a positive integer, otherwise the
// hardware concurrency (at least 1).
std::size_t worker_threads();

// Runs fn(i) for i in [0, n) across worker_threads() threads. Work items must
// be independent; results must not depend on scheduling. The first exception
// thrown by any item is rethrown after all workers finish.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

STYLELAB_END_PRECISION
}  // namespace stylelab
