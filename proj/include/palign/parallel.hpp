#pragma once

#include <cstddef>
#include <functional>
#include <thread>
#include <vector>

namespace palign {

/// Runs fn(i) for i in [0, n) over the given number of threads. Each index is
/// processed exactly once and results land in caller-owned slots, so the
/// output is identical to the serial run regardless of thread count.
inline void parallel_for(std::size_t n, std::size_t threads,
                         const std::function<void(std::size_t)>& fn) {
    if (threads <= 1 || n < 2) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    const std::size_t workers = std::min(threads, n);
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&, w]() {
            for (std::size_t i = w; i < n; i += workers) fn(i);
        });
    }
    for (auto& t : pool) t.join();
}

}  // namespace palign
