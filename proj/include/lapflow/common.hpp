#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace lapflow {

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw std::invalid_argument(msg);
}

inline void require_io(bool cond, const std::string& msg) {
    if (!cond) throw std::runtime_error(msg);
}

// FNV-1a over arbitrary bytes, used to derive named seed sub-streams.
inline uint64_t fnv1a(const void* bytes, size_t n, uint64_t h = 1469598103934665603ull) {
    const auto* p = static_cast<const unsigned char*>(bytes);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 1099511628211ull;
    }
    return h;
}

inline uint64_t hash_combine(uint64_t h, uint64_t v) {
    return fnv1a(&v, sizeof(v), h);
}

// Deterministic RNG. All randomness in a run flows from one root seed via
// named sub-streams, so any stage can be recomputed in isolation (this is
// what makes checkpoint resume bit-exact without serializing RNG state).
// splitmix64 core; normal() is hand-rolled Box-Muller so draws do not depend
// on the standard library's distribution internals.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed ? seed : 0x9e3779b97f4a7c15ull) {}

    static Rng stream(uint64_t root, const std::string& name) {
        uint64_t h = fnv1a(name.data(), name.size());
        return Rng(hash_combine(h, root));
    }
    static Rng stream(uint64_t root, const std::string& name, uint64_t index) {
        uint64_t h = fnv1a(name.data(), name.size());
        return Rng(hash_combine(hash_combine(h, root), index));
    }

    uint64_t next_u64() {
        state_ += 0x9e3779b97f4a7c15ull;
        uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // uniform in [0,1)
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // uniform integer in [0, n)
    uint64_t below(uint64_t n) { return next_u64() % n; }

    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

private:
    uint64_t state_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

// Runs fn(i) for i in [0, n) on up to nthreads threads. Work is split by
// static round-robin so the assignment of items to threads never depends on
// scheduling; callers that need deterministic reductions accumulate into
// per-item slots and reduce in index order afterwards.
inline void parallel_for(int64_t n, int nthreads, const std::function<void(int64_t)>& fn) {
    if (n <= 0) return;
    if (nthreads <= 1 || n == 1) {
        for (int64_t i = 0; i < n; ++i) fn(i);
        return;
    }
    int t = static_cast<int>(std::min<int64_t>(nthreads, n));
    std::vector<std::thread> workers;
    workers.reserve(t);
    for (int w = 0; w < t; ++w) {
        workers.emplace_back([&, w]() {
            for (int64_t i = w; i < n; i += t) fn(i);
        });
    }
    for (auto& th : workers) th.join();
}

inline int default_threads() {
    unsigned hc = std::thread::hardware_concurrency();
    return hc == 0 ? 1 : static_cast<int>(hc > 8 ? 8 : hc);
}

}  // namespace lapflow
