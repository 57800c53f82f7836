#include "regeval/parallel.hpp"

#include <algorithm>
#include <cstdlib>
#include <string>
#include <thread>
#include <vector>

namespace regeval {

namespace {

int env_threads() {
  if (const char* s = std::getenv("REGEVAL_THREADS")) {
    try {
      int n = std::stoi(s);
      if (n >= 1) return n;
    } catch (...) {
    }
  }
  return 0;
}

thread_local int t_inner = 0;

constexpr std::int64_t kSumBlock = 4096;

}  // namespace

int inner_threads() {
  if (t_inner > 0) return t_inner;
  int e = env_threads();
  return e > 0 ? e : 1;
}

void set_inner_threads(int n) { t_inner = std::max(1, n); }

int worker_threads() {
  int e = env_threads();
  if (e > 0) return e;
  return std::max(1u, std::thread::hardware_concurrency());
}

void parallel_for(std::int64_t n, const std::function<void(std::int64_t, std::int64_t)>& body) {
  if (n <= 0) return;
  const int threads = static_cast<int>(std::min<std::int64_t>(inner_threads(), n));
  if (threads <= 1) {
    body(0, n);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(threads - 1);
  const std::int64_t chunk = (n + threads - 1) / threads;
  for (int t = 1; t < threads; ++t) {
    const std::int64_t b = t * chunk;
    const std::int64_t e = std::min(n, b + chunk);
    if (b >= e) break;
    pool.emplace_back([&body, b, e] {
      set_inner_threads(1);
      body(b, e);
    });
  }
  body(0, std::min(n, chunk));
  for (auto& th : pool) th.join();
}

double ordered_sum(std::int64_t n, const std::function<double(std::int64_t)>& f) {
  const std::int64_t blocks = (n + kSumBlock - 1) / kSumBlock;
  std::vector<double> partial(static_cast<std::size_t>(blocks), 0.0);
  parallel_for(blocks, [&](std::int64_t b0, std::int64_t b1) {
    for (std::int64_t b = b0; b < b1; ++b) {
      double s = 0.0;
      const std::int64_t end = std::min(n, (b + 1) * kSumBlock);
      for (std::int64_t i = b * kSumBlock; i < end; ++i) s += f(i);
      partial[static_cast<std::size_t>(b)] = s;
    }
  });
  double total = 0.0;
  for (double p : partial) total += p;
  return total;
}

}  // namespace regeval
