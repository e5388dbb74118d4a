#pragma once

#include <cstddef>
#include <functional>

namespace cqtnet {

// Worker count used when a caller passes threads <= 0. Defaults to the number
// of hardware threads.
int default_thread_count();
void set_default_thread_count(int threads);

// Runs body(i) for i in [0, count) on up to `threads` workers. Work items are
// claimed dynamically; the first exception thrown is rethrown on the caller.
void parallel_for(std::size_t count, int threads,
                  const std::function<void(std::size_t)>& body);

}  // namespace cqtnet
