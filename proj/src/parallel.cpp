// Copyright (c) 2026, The medtune Authors
// SPDX-License-Identifier: Apache-2.0

#include "medtune/parallel.hpp"

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <thread>
#include <vector>

namespace medtune {
namespace {

int initial_thread_count() {
  if (const char* env = std::getenv("MEDTUNE_THREADS")) {
    const int n = std::atoi(env);
    if (n > 0) return n;
  }
  return 1;
}

std::atomic<int>& thread_setting() {
  static std::atomic<int> value{initial_thread_count()};
  return value;
}

}  // namespace

int thread_count() { return thread_setting().load(std::memory_order_relaxed); }

void set_thread_count(int n) { thread_setting().store(std::max(1, n), std::memory_order_relaxed); }

void parallel_for(std::size_t n, std::size_t min_per_thread,
                  const std::function<void(std::size_t, std::size_t)>& body) {
  const std::size_t by_work = std::max<std::size_t>(1, n / std::max<std::size_t>(1, min_per_thread));
  const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(thread_count()), by_work);
  if (workers <= 1) {
    body(0, n);
    return;
  }
  const std::size_t per = (n + workers - 1) / workers;
  std::vector<std::thread> pool;
  pool.reserve(workers - 1);
  for (std::size_t w = 1; w < workers; ++w) {
    const std::size_t begin = std::min(n, w * per);
    const std::size_t end = std::min(n, begin + per);
    if (begin < end) pool.emplace_back(body, begin, end);
  }
  body(0, std::min(n, per));
  for (auto& t : pool) t.join();
}

}  // namespace medtune
