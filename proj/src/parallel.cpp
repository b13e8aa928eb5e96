#include "qstar/parallel.hpp"

#include <algorithm>
#include <atomic>
#include <exception>
#include <thread>
#include <vector>

namespace qstar {

void parallel_for(std::size_t n, std::size_t jobs, const std::function<void(std::size_t)>& fn) {
  std::vector<std::exception_ptr> errors(n);
  auto guarded = [&](std::size_t i) {
    try {
      fn(i);
    } catch (...) {
      errors[i] = std::current_exception();
    }
  };
  const std::size_t workers = std::min(std::max<std::size_t>(jobs, 1), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) guarded(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::jthread> threads;
    threads.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w)
      threads.emplace_back([&] {
        for (std::size_t i = next++; i < n; i = next++) guarded(i);
      });
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

} // namespace qstar
