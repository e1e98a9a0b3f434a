#pragma once

#include <algorithm>
#include <functional>
#include <thread>
#include <vector>

namespace voxcarve::detail {

// Chunked parallel loop over [0, n). Each index runs exactly once; workers
// write disjoint outputs, so results do not depend on scheduling.
inline void parallel_for(int n, const std::function<void(int)>& body) {
  if (n <= 0) return;
  const unsigned hw = std::max(1u, std::thread::hardware_concurrency());
  const int threads = static_cast<int>(std::min<unsigned>(hw, static_cast<unsigned>(n)));
  if (threads <= 1) {
    for (int i = 0; i < n; ++i) body(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(threads);
  const int chunk = (n + threads - 1) / threads;
  for (int t = 0; t < threads; ++t) {
    const int begin = t * chunk;
    const int end = std::min(n, begin + chunk);
    if (begin >= end) break;
    pool.emplace_back([&body, begin, end] {
      for (int i = begin; i < end; ++i) body(i);
    });
  }
  for (auto& th : pool) th.join();
}

}  // namespace voxcarve::detail
