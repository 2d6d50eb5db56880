#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace mspg {

// Runtime failure (bad shapes, domain errors, broken invariants).
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Invalid user-supplied configuration; the CLI maps this to exit code 2.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

[[noreturn]] inline void fail(const std::string& msg) { throw Error(msg); }

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << 'x';
        os << s[i];
    }
    os << ']';
    return os.str();
}

inline std::vector<std::size_t> row_major_strides(const Shape& s) {
    std::vector<std::size_t> st(s.size(), 1);
    for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
    return st;
}

// Kernel-level parallelism cap from MSPG_THREADS (0 or unset = serial).
inline unsigned kernel_threads() {
    static const unsigned n = [] {
        const char* e = std::getenv("MSPG_THREADS");
        if (!e) return 0u;
        long v = std::strtol(e, nullptr, 10);
        if (v < 0) v = 0;
        unsigned hw = std::thread::hardware_concurrency();
        return static_cast<unsigned>(std::min<long>(v, hw ? hw : 1));
    }();
    return n;
}

// Chunked parallel loop over [0, n). Each index is owned by exactly one
// thread, so any body writing disjoint outputs stays bit-deterministic
// regardless of the thread count.
template <class F>
void parallel_for(std::size_t n, F&& body) {
    unsigned nt = kernel_threads();
    if (nt <= 1 || n < 2 * nt) {
        for (std::size_t i = 0; i < n; ++i) body(i);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(nt);
    std::size_t chunk = (n + nt - 1) / nt;
    for (unsigned t = 0; t < nt; ++t) {
        std::size_t lo = t * chunk, hi = std::min(n, lo + chunk);
        if (lo >= hi) break;
        pool.emplace_back([lo, hi, &body] {
            for (std::size_t i = lo; i < hi; ++i) body(i);
        });
    }
    for (auto& th : pool) th.join();
}

}  // namespace mspg
