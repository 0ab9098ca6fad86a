#pragma once

#include <algorithm>
#include <cstddef>
#include <thread>
#include <vector>

namespace mixq {

// Splits [0, n) into contiguous chunks, one per worker, and runs
// fn(begin, end) on each. threads <= 1 runs inline.
template <typename Fn>
void parallel_for_range(std::size_t n, unsigned threads, Fn&& fn) {
  const std::size_t workers = std::min<std::size_t>(std::max(1u, threads), n);
  if (workers <= 1) {
    if (n) fn(std::size_t{0}, n);
    return;
  }
  std::vector<std::jthread> pool;
  pool.reserve(workers);
  const std::size_t chunk = (n + workers - 1) / workers;
  for (std::size_t w = 0; w < workers; ++w) {
    const std::size_t b = w * chunk, e = std::min(n, b + chunk);
    if (b >= e) break;
    pool.emplace_back([&fn, b, e] { fn(b, e); });
  }
}

}  // namespace mixq
