#pragma once

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <thread>
#include <vector>

namespace cloudmask {

namespace detail {
inline int& thread_setting() {
  static int n = 1;
  return n;
}
}  // namespace detail

/// Number of worker threads used by the heavy kernels. Default 1.
inline int threads() { return detail::thread_setting(); }

inline void set_threads(int n) { detail::thread_setting() = std::max(1, n); }

/// Work is always split into the same fixed chunk layout no matter how many
/// threads execute it, and chunks write disjoint outputs; callers that reduce
/// per-chunk partials do so in chunk order. Results are therefore identical
/// for any thread count.
inline constexpr std::int64_t kParallelChunks = 8;

/// Splits [0, count) into at most kParallelChunks contiguous ranges and runs
/// fn(chunk_index, begin, end) for each, possibly on worker threads.
template <typename Fn>
void parallel_for_chunks(std::int64_t count, Fn&& fn) {
  if (count <= 0) return;
  const std::int64_t chunks = std::min(count, kParallelChunks);
  const std::int64_t base = count / chunks;
  const std::int64_t rem = count % chunks;
  auto chunk_range = [&](std::int64_t idx) {
    const std::int64_t begin = idx * base + std::min(idx, rem);
    const std::int64_t size = base + (idx < rem ? 1 : 0);
    return std::pair<std::int64_t, std::int64_t>(begin, begin + size);
  };

  const int workers = std::min<std::int64_t>(threads(), chunks);
  if (workers <= 1) {
    for (std::int64_t idx = 0; idx < chunks; ++idx) {
      auto [b, e] = chunk_range(idx);
      fn(idx, b, e);
    }
    return;
  }

  std::atomic<std::int64_t> next{0};
  auto work = [&]() {
    for (;;) {
      const std::int64_t idx = next.fetch_add(1);
      if (idx >= chunks) return;
      auto [b, e] = chunk_range(idx);
      fn(idx, b, e);
    }
  };
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(workers) - 1);
  for (int t = 1; t < workers; ++t) pool.emplace_back(work);
  work();
  for (auto& th : pool) th.join();
}

}  // namespace cloudmask
