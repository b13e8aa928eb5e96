#pragma once

#include <cstddef>
#include <functional>

namespace qstar {

/// Runs fn(i) for every i in [0, n) on up to `jobs` threads. Each index runs exactly once;
/// the first exception (by index) is rethrown after all workers finish.
void parallel_for(std::size_t n, std::size_t jobs, const std::function<void(std::size_t)>& fn);

} // namespace qstar
