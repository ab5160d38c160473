#pragma once

#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <mutex>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

namespace sbss {

// Raised when a backend cannot find a requested record (manifest miss, absent file).
struct NotFoundError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Raised when stored data fails a structural check (bad magic, size mismatch).
struct CorruptInputError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Raised when a run configuration violates an invariant.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline int round_px(double v) { return static_cast<int>(std::llround(v)); }

// --- deterministic seed derivation -----------------------------------------

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

inline uint64_t mix64(uint64_t a, uint64_t b) {
    return splitmix64(a ^ (b + 0x9e3779b97f4a7c15ull + (a << 6) + (a >> 2)));
}

inline uint64_t hash_str(std::string_view s) {
    uint64_t h = 0xcbf29ce484222325ull;  // FNV-1a
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

// Uniform in [0, 1) from a 64-bit word.
inline double unit_double(uint64_t x) { return static_cast<double>(x >> 11) * 0x1.0p-53; }

// --- deterministic parallel loop --------------------------------------------
//
// Splits [0, n) into contiguous blocks, one per worker. The callable must write
// only to per-index state; under that contract results are identical for any
// worker count.
template <typename F>
void parallel_for(int64_t n, int workers, F&& fn) {
    if (n <= 0) return;
    if (workers <= 1 || n == 1) {
        for (int64_t i = 0; i < n; ++i) fn(i);
        return;
    }
    int w = static_cast<int>(std::min<int64_t>(workers, n));
    std::vector<std::thread> pool;
    pool.reserve(w);
    std::exception_ptr err;
    std::mutex err_mu;
    for (int k = 0; k < w; ++k) {
        int64_t lo = n * k / w;
        int64_t hi = n * (k + 1) / w;
        pool.emplace_back([&, lo, hi] {
            try {
                for (int64_t i = lo; i < hi; ++i) fn(i);
            } catch (...) {
                std::lock_guard<std::mutex> g(err_mu);
                if (!err) err = std::current_exception();
            }
        });
    }
    for (auto& t : pool) t.join();
    if (err) std::rethrow_exception(err);
}

inline int log_level() {
    const char* v = std::getenv("SBSS_LOG");
    return v ? std::atoi(v) : 0;
}

}  // namespace sbss
