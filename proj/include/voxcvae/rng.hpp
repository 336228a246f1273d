#pragma once

#include <cmath>
#include <cstdint>

namespace voxcvae {

// Counter-based generator: output k of stream s is a pure function of
// (seed, s, k). Replay is exact and independent streams can be split off
// for parallel work without coordination.
class Rng {
public:
    explicit Rng(std::uint64_t seed, std::uint64_t stream_id = 0)
        : seed_(seed),
          stream_(stream_id),
          counter_(0),
          base_(mix(seed + 0x9E3779B97F4A7C15ull * (stream_id + 1))) {}

    Rng split(std::uint64_t stream_id) const { return Rng(seed_, stream_id); }

    std::uint64_t seed() const { return seed_; }
    std::uint64_t stream_id() const { return stream_; }
    std::uint64_t counter() const { return counter_; }

    std::uint64_t next_u64() { return mix(base_ + 0x9E3779B97F4A7C15ull * ++counter_); }

    // uniform in [0, 1)
    double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // integer in [0, n)
    std::uint64_t below(std::uint64_t n) { return n ? next_u64() % n : 0; }

    // standard normal via Box-Muller; always consumes exactly two draws so
    // the counter advance does not depend on call history
    double normal() {
        double u1 = (double(next_u64() >> 11) + 1.0) * 0x1.0p-53;  // (0, 1]
        double u2 = double(next_u64() >> 11) * 0x1.0p-53;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925287 * u2);
    }

private:
    // splitmix64 finalizer
    static std::uint64_t mix(std::uint64_t z) {
        z ^= z >> 30;
        z *= 0xBF58476D1CE4E5B9ull;
        z ^= z >> 27;
        z *= 0x94D049BB133111EBull;
        z ^= z >> 31;
        return z;
    }

    std::uint64_t seed_;
    std::uint64_t stream_;
    std::uint64_t counter_;
    std::uint64_t base_;
};

}  // namespace voxcvae
