#pragma once

#include <cstddef>
#include <functional>

namespace gradtrace {

// Worker cap: GRADTRACE_THREADS if set (>= 1), otherwise the logical CPU
// count. Read once per process.
size_t worker_count();

// Runs body(i) for i in [0, n). Work items must be independent; callers get
// determinism by writing into per-index slots and reducing in index order
// afterwards. Exceptions from workers are rethrown on the calling thread.
void parallel_for(size_t n, const std::function<void(size_t)>& body);

} // namespace gradtrace
