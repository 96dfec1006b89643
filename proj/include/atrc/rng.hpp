// Counter-based deterministic RNG (splitmix64 core). Draws are a pure
// function of (seed, stream path, counter), so any point of a run can be
// reproduced without persisting generator state: checkpoints only need the
// seed and the iteration.

#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>

namespace atrc {

inline std::uint64_t mix64(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

class CounterRng {
public:
    explicit CounterRng(std::uint64_t seed, std::initializer_list<std::uint64_t> path = {})
        : state_(mix64(seed ^ 0x5851f42d4c957f2dULL)) {
        for (std::uint64_t p : path) state_ = mix64(state_ ^ mix64(p));
    }

    CounterRng at(std::uint64_t tag) const {
        CounterRng r(*this);
        r.state_ = mix64(r.state_ ^ mix64(tag));
        r.counter_ = 0;
        return r;
    }

    std::uint64_t next_u64() { return mix64(state_ + ++counter_); }

    // uniform in [0,1)
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    // uniform strictly inside (0,1)
    double uniform_open() {
        return (static_cast<double>(next_u64() >> 12) + 0.5) * 0x1.0p-52;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    std::uint64_t below(std::uint64_t n) { return n ? next_u64() % n : 0; }

    // standard normal via Box-Muller
    double normal() {
        const double u1 = uniform_open();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

    // Gumbel(0,1) = -log(-log U)
    double gumbel() { return -std::log(-std::log(uniform_open())); }

private:
    std::uint64_t state_;
    std::uint64_t counter_ = 0;
};

// Fixed stream tags so independent consumers never collide.
namespace rng_stream {
constexpr std::uint64_t kParamInit = 0x01;
constexpr std::uint64_t kBatch = 0x02;
constexpr std::uint64_t kGumbel = 0x03;
constexpr std::uint64_t kScene = 0x04;
constexpr std::uint64_t kKmeans = 0x05;
constexpr std::uint64_t kPermutation = 0x06;
}  // namespace rng_stream

}  // namespace atrc
