// Copyright (c) 2026 The flowlens authors.
// SPDX-License-Identifier: Apache-2.0

#ifndef FLOWLENS_PARALLEL_HPP
#define FLOWLENS_PARALLEL_HPP

#include <functional>

namespace flowlens {

// Worker-thread count: an explicit request wins, then the FLOWLENS_THREADS
// environment variable, then hardware concurrency. Always at least 1.
int resolve_threads(int requested);

// Runs fn(i) for i in [0, n) across at most `threads` workers with a static
// chunk partition. Each index must write only its own outputs; results are
// then identical for any thread count.
void parallel_for(int n, int threads, const std::function<void(int)>& fn);

}  // namespace flowlens

#endif
