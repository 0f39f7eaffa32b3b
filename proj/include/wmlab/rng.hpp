#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <sstream>
#include <string>

#include "wmlab/error.hpp"

namespace wmlab {

// Deterministic counter-mode generator built on the splitmix64 output
// function.  The 256-bit state is {seed, stream, counter, reserved}; each
// draw hashes (seed + stream + counter * golden) through the splitmix64
// finalizer and increments the counter.  Properties relied on elsewhere:
//
//  - identical (seed, stream, counter) gives identical draws on every
//    platform; there is no hidden cache, so interleaving callers cannot
//    desynchronise a stream,
//  - fork(salt) derives an independent stream without disturbing the
//    parent counter,
//  - the full state serializes to a short hex string for checkpointing.
class RngState {
public:
    RngState() : RngState(0) {}

    explicit RngState(std::uint64_t seed) : seed_(mix(seed ^ kSeedTweak)), stream_(0), counter_(0) {}

    std::uint64_t next_u64() {
        std::uint64_t z = seed_ + stream_ + counter_ * kGolden;
        ++counter_;
        return mix(z);
    }

    // Uniform in [0, 1) with 53 random bits.
    double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) {
        if (!(lo <= hi)) throw ValueError(detail::cat("uniform: empty interval [", lo, ", ", hi, ")"));
        return lo + (hi - lo) * uniform01();
    }

    // Standard normal via Box-Muller.  Both draws are consumed every call and
    // nothing is cached, so the stream position stays a pure function of the
    // call count.
    double normal() {
        double u1 = 1.0 - uniform01(); // (0, 1]
        double u2 = uniform01();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    // Unbiased integer in [0, n) by rejection.
    std::uint64_t below(std::uint64_t n) {
        if (n == 0) throw ValueError("below: n must be positive");
        std::uint64_t threshold = (0 - n) % n; // 2^64 mod n
        for (;;) {
            std::uint64_t r = next_u64();
            if (r >= threshold) return r % n;
        }
    }

    int index(int n) {
        if (n <= 0) throw ValueError("index: n must be positive");
        return static_cast<int>(below(static_cast<std::uint64_t>(n)));
    }

    // Independent child stream.  Children with distinct salts never collide
    // with each other or with the parent.
    [[nodiscard]] RngState fork(std::uint64_t salt) const {
        RngState child;
        child.seed_ = seed_;
        child.stream_ = mix(stream_ ^ mix(salt + kStreamTweak));
        child.counter_ = 0;
        return child;
    }

    [[nodiscard]] std::string serialize() const {
        std::ostringstream os;
        os << std::hex << seed_ << ':' << stream_ << ':' << counter_;
        return os.str();
    }

    static RngState deserialize(const std::string& text) {
        RngState r;
        char c1 = 0, c2 = 0;
        std::istringstream is(text);
        is >> std::hex >> r.seed_ >> c1 >> r.stream_ >> c2 >> r.counter_;
        if (!is || c1 != ':' || c2 != ':') throw ValueError(detail::cat("RngState: cannot parse '", text, "'"));
        char extra = 0;
        if (is >> extra) throw ValueError(detail::cat("RngState: trailing data in '", text, "'"));
        return r;
    }

    bool operator==(const RngState& other) const = default;

private:
    static constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ull;
    static constexpr std::uint64_t kSeedTweak = 0xA02B9FE0C3D4E5F6ull;
    static constexpr std::uint64_t kStreamTweak = 0x7B1654C9D2E3F400ull;

    static constexpr std::uint64_t mix(std::uint64_t z) {
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
};

} // namespace wmlab
