#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <thread>
#include <vector>

namespace css {

namespace detail {
inline std::atomic<int>& thread_count() {
  static std::atomic<int> n{1};
  return n;
}
}  // namespace detail

/// Number of worker threads used by the data-parallel kernels. The default
/// of 1 is the serial reference mode.
inline void set_num_threads(int n) { detail::thread_count() = std::max(1, n); }
inline int num_threads() { return detail::thread_count(); }

/// Runs fn(begin, end) over disjoint chunks of [0, n). Every index is handled
/// by exactly one call and kernels never reduce across chunks, so results do
/// not depend on the thread count.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t min_chunk, Fn&& fn) {
  const auto threads = static_cast<std::size_t>(num_threads());
  if (threads <= 1 || n < 2 * min_chunk) {
    fn(std::size_t{0}, n);
    return;
  }
  const std::size_t chunks = std::min(threads, (n + min_chunk - 1) / min_chunk);
  const std::size_t step = (n + chunks - 1) / chunks;
  std::vector<std::jthread> pool;
  pool.reserve(chunks - 1);
  for (std::size_t c = 1; c < chunks; ++c) {
    const std::size_t b = c * step;
    const std::size_t e = std::min(n, b + step);
    if (b < e) pool.emplace_back([&fn, b, e] { fn(b, e); });
  }
  fn(std::size_t{0}, std::min(n, step));
}

}  // namespace css
