#include "mixri/thread_pool.hpp"

#include <atomic>
#include <cstdlib>
#include <thread>

namespace mixri {

int worker_count() {
  if (const char* env = std::getenv("MIXRI_THREADS")) {
    const int n = std::atoi(env);
    if (n >= 1) return n;
  }
  const unsigned hc = std::thread::hardware_concurrency();
  return hc ? static_cast<int>(hc) : 1;
}

void parallel_for(int64_t n, const std::function<void(int64_t)>& fn) {
  const int workers = std::min<int64_t>(worker_count(), n);
  if (workers <= 1) {
    for (int64_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<int64_t> next(0);
  std::vector<std::thread> threads;
  threads.reserve(static_cast<size_t>(workers));
  for (int w = 0; w < workers; ++w)
    threads.emplace_back([&]() {
      for (;;) {
        const int64_t i = next.fetch_add(1);
        if (i >= n) break;
        fn(i);
      }
    });
  for (auto& t : threads) t.join();
}

}  // namespace mixri
