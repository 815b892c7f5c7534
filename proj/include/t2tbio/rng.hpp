#pragma once

// xoshiro256** seeded through splitmix64. Both generators are fully specified by
// their published reference algorithms so fixtures can be regenerated bit-for-bit
// from any language.

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>

namespace t2tbio {

inline std::uint64_t splitmix64(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

class Rng {
public:
    using State = std::array<std::uint64_t, 4>;

    explicit Rng(std::uint64_t seed = 0) {
        std::uint64_t sm = seed;
        for (auto& word : s_) word = splitmix64(sm);
    }

    static Rng from_state(const State& s) {
        Rng r;
        r.s_ = s;
        return r;
    }
    const State& state() const { return s_; }

    std::uint64_t next() {
        const std::uint64_t result = rotl(s_[1] * 5, 7) * 9;
        const std::uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return result;
    }

    // Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

    // Uniform integer in [0, n) by rejection; n must be positive.
    std::uint64_t below(std::uint64_t n) {
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t x = next();
        while (x >= limit) x = next();
        return x % n;
    }

    // Geometric on {1, 2, ...} with the given mean (>= 1).
    std::uint64_t geometric(double mean) {
        if (mean <= 1.0) return 1;
        const double p = 1.0 / mean;
        const double u = uniform();
        return 1 + static_cast<std::uint64_t>(std::floor(std::log1p(-u) / std::log1p(-p)));
    }

    // Standard normal via Box-Muller (one draw per pair; the second value is discarded).
    double normal() {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    // Categorical draw proportional to non-negative weights with positive sum.
    template <typename Range>
    std::size_t categorical(const Range& weights) {
        double total = 0.0;
        for (double w : weights) total += w;
        double x = uniform() * total;
        std::size_t last_positive = 0;
        std::size_t i = 0;
        for (double w : weights) {
            if (w > 0.0) {
                last_positive = i;
                if (x < w) return i;
                x -= w;
            }
            ++i;
        }
        return last_positive;
    }

private:
    static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
    State s_{};
};

}  // namespace t2tbio
