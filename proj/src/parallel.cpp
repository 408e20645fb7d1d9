#include "facmap/parallel.hpp"

#include <atomic>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace facmap {

namespace {
std::atomic<int> g_threads{1};
}

void set_num_threads(int threads) { g_threads.store(threads < 1 ? 1 : threads); }

int num_threads() { return g_threads.load(); }

void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

}  // namespace facmap
