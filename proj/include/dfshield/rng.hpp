// Copyright 2026 The dfshield Authors.
// Licensed under the Apache License, Version 2.0.

#pragma once

#include <cstdint>
#include <cmath>
#include <string_view>

namespace dfshield {

// FNV-1a 64-bit hash, used to derive per-stage seeds from names.
inline std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

// Splittable pseudo-random generator based on SplitMix64
// (Steele, Lea, Flood 2014). One 64-bit word of state; the output
// function is a finalizing mix of the incremented state. Identical
// seeds give identical streams. split()/derive() produce statistically
// independent child generators from a label or index.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    // Uniform double in [0, 1), 53 bits of mantissa.
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) {
        return lo + (hi - lo) * uniform();
    }

    // Index in [0, n).
    std::size_t index(std::size_t n) {
        return static_cast<std::size_t>(next_u64() % n);
    }

    // Standard normal via Box-Muller. Two uniforms per draw; no cached
    // second value so the stream position is a pure function of the
    // number of calls.
    double normal() {
        double u1 = uniform();
        // avoid log(0)
        while (u1 <= 0.0) u1 = uniform();
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) *
               std::cos(6.283185307179586476925286766559 * u2);
    }

    // Child generator for an indexed substream (e.g. one per batch).
    Rng derive(std::uint64_t stream) const {
        Rng mix(state_ ^ (0xA0761D6478BD642FULL * (stream + 1)));
        return Rng(mix.next_u64());
    }

    // Child generator for a named stage.
    Rng derive(std::string_view name) const {
        return derive(fnv1a(name));
    }

    std::uint64_t state() const { return state_; }

private:
    std::uint64_t state_;
};

} // namespace dfshield
