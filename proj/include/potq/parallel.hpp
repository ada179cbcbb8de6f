#pragma once

#include <algorithm>
#include <cstdint>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace potq {

// Split [0, total) into contiguous chunks across up to `threads` workers.
// fn(begin, end) runs concurrently on disjoint ranges; with threads <= 1 it
// runs inline with no thread machinery. The first worker exception is
// rethrown after all workers join.
template <typename Fn>
void parallel_for(uint64_t total, int threads, Fn&& fn) {
    if (threads <= 1 || total <= 1) {
        fn(uint64_t{0}, total);
        return;
    }
    const uint64_t n = std::min<uint64_t>(static_cast<uint64_t>(threads), total);
    const uint64_t chunk = total / n;

    std::exception_ptr first_error;
    std::mutex error_mutex;
    auto guarded = [&](uint64_t b, uint64_t e) {
        try {
            fn(b, e);
        } catch (...) {
            std::lock_guard<std::mutex> lock(error_mutex);
            if (!first_error) first_error = std::current_exception();
        }
    };

    std::vector<std::thread> pool;
    pool.reserve(static_cast<size_t>(n - 1));
    for (uint64_t t = 0; t + 1 < n; ++t) {
        pool.emplace_back([&guarded, t, chunk] { guarded(t * chunk, (t + 1) * chunk); });
    }
    guarded((n - 1) * chunk, total);  // last chunk includes the remainder
    for (auto& th : pool) th.join();
    if (first_error) std::rethrow_exception(first_error);
}

}  // namespace potq
