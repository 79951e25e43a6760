#pragma once

#include <cstdint>
#include <functional>

namespace faxbev {

// Worker threads used by parallel_for. Defaults to hardware concurrency
// capped by the FAXBEV_THREADS environment variable when set.
int worker_count();
void set_worker_count(int n);

// Runs fn(begin, end) over contiguous chunks covering [0, n). Chunk
// boundaries depend only on n and the worker count, and each chunk writes
// its own output range, so results are deterministic. Small n runs inline.
void parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& fn);

}  // namespace faxbev
