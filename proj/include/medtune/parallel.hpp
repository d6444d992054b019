// Copyright (c) 2026, The medtune Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <functional>

namespace medtune {

// Process-wide cap on worker threads used by kernels. Defaults to the value
// of MEDTUNE_THREADS when set, otherwise 1.
int thread_count();
void set_thread_count(int n);

// Runs body(begin, end) over a static partition of [0, n). Partitions depend
// only on n and the thread count, so per-index results are deterministic.
void parallel_for(std::size_t n, std::size_t min_per_thread,
                  const std::function<void(std::size_t, std::size_t)>& body);

}  // namespace medtune
