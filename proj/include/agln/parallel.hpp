#pragma once

#include <cstdlib>
#include <functional>
#include <thread>
#include <vector>

namespace agln {

// Worker count from AGLN_THREADS; default 1 (strict sequential mode).
inline int thread_count() {
    static const int n = [] {
        const char* env = std::getenv("AGLN_THREADS");
        if (!env) return 1;
        int v = std::atoi(env);
        if (v <= 0) v = static_cast<int>(std::thread::hardware_concurrency());
        return v < 1 ? 1 : v;
    }();
    return n;
}

// Splits [0, n) into contiguous chunks, one per worker. Each index is owned
// by exactly one worker and every per-index reduction keeps its sequential
// order, so results are bitwise identical for any worker count.
inline void parallel_for(std::int64_t n, const std::function<void(std::int64_t, std::int64_t)>& body) {
    const int workers = thread_count();
    if (workers <= 1 || n < 2) {
        body(0, n);
        return;
    }
    const int used = static_cast<int>(n < workers ? n : workers);
    const std::int64_t chunk = (n + used - 1) / used;
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(used - 1));
    for (int w = 1; w < used; ++w) {
        const std::int64_t lo = w * chunk;
        const std::int64_t hi = std::min<std::int64_t>(n, lo + chunk);
        if (lo >= hi) break;
        pool.emplace_back([&body, lo, hi] { body(lo, hi); });
    }
    body(0, std::min<std::int64_t>(n, chunk));
    for (auto& t : pool) t.join();
}

}  // namespace agln
