#pragma once

#include <algorithm>
#include <cstddef>
#include <thread>
#include <vector>

namespace facmap {

// Process-wide width for batch evaluation. 1 keeps every reduction sequential.
void set_num_threads(int threads);
int num_threads();

// Keeps large per-iteration buffers on the heap instead of fresh mmaps
// (glibc only; a no-op elsewhere).
void tune_allocator();

// Splits [0, n) into contiguous chunks, one per worker, and calls
// fn(begin, end, worker). Chunk boundaries depend only on n and the worker
// count, so per-worker partial results can be merged in a fixed order.
template <class Fn>
void parallel_for(std::size_t n, Fn&& fn) {
  const std::size_t workers =
      std::max<std::size_t>(1, std::min<std::size_t>(static_cast<std::size_t>(num_threads()), n / 256));
  if (workers <= 1) {
    fn(std::size_t{0}, n, std::size_t{0});
    return;
  }
  std::vector<std::jthread> pool;
  pool.reserve(workers - 1);
  const std::size_t chunk = (n + workers - 1) / workers;
  for (std::size_t w = 1; w < workers; ++w) {
    const std::size_t b = std::min(n, w * chunk);
    const std::size_t e = std::min(n, b + chunk);
    pool.emplace_back([&fn, b, e, w] { fn(b, e, w); });
  }
  fn(std::size_t{0}, std::min(n, chunk), std::size_t{0});
}

// Number of workers parallel_for will use for a range of size n.
inline std::size_t worker_count(std::size_t n) {
  return std::max<std::size_t>(1, std::min<std::size_t>(static_cast<std::size_t>(num_threads()), n / 256));
}

}  // namespace facmap
