#ifndef MFSTOP_PARALLEL_HPP
#define MFSTOP_PARALLEL_HPP

#include <cstddef>
#include <thread>
#include <vector>

namespace mfstop {

/**
 * Runs fn(begin, end) over a partition of [0, n). Safe only for bodies whose
 * writes are disjoint per index; reductions stay with the caller so result
 * bits never depend on the thread count.
 */
template <typename Fn>
void parallel_for(std::size_t n, int threads, Fn&& fn) {
    if (threads <= 1 || n < 2048) {
        fn(std::size_t{0}, n);
        return;
    }
    const std::size_t t = static_cast<std::size_t>(threads);
    const std::size_t chunk = (n + t - 1) / t;
    std::vector<std::thread> pool;
    pool.reserve(t);
    for (std::size_t w = 0; w < t; ++w) {
        const std::size_t b = w * chunk;
        if (b >= n) break;
        const std::size_t e = b + chunk < n ? b + chunk : n;
        pool.emplace_back([&fn, b, e] { fn(b, e); });
    }
    for (auto& th : pool) th.join();
}

} // namespace mfstop

#endif
