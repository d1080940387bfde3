#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace vlkit {

/// splitmix64 finalizer; used as the mixing function for every keyed stream.
constexpr std::uint64_t mix64(std::uint64_t x) noexcept {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

constexpr std::uint64_t hash_key(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0,
                                 std::uint64_t c = 0) noexcept {
    std::uint64_t h = mix64(seed);
    h = mix64(h ^ a);
    h = mix64(h ^ (b + 0x632BE59BD9B4E019ULL));
    h = mix64(h ^ (c + 0x85157AF5ULL));
    return h;
}

/// Counter-based random stream keyed by up to four integers.
///
/// Two streams with the same key produce the same sequence on every platform;
/// nothing here depends on implementation-defined standard distributions.
class KeyedStream {
public:
    using result_type = std::uint64_t;

    KeyedStream() = default;
    explicit KeyedStream(std::uint64_t seed, std::uint64_t a = 0, std::uint64_t b = 0,
                         std::uint64_t c = 0) noexcept
        : base_(hash_key(seed, a, b, c)) {}

    static constexpr result_type min() noexcept { return 0; }
    static constexpr result_type max() noexcept { return ~result_type{0}; }

    result_type operator()() noexcept { return mix64(base_ + 0x9E3779B97F4A7C15ULL * ++counter_); }

    /// Uniform in [0, 1) with 53 random bits.
    double uniform() noexcept { return static_cast<double>((*this)() >> 11) * 0x1.0p-53; }

    /// Uniform integer in [0, n). n must be positive.
    std::uint64_t below(std::uint64_t n) noexcept {
        // Lemire's multiply-shift; bias is below 2^-64 * n and irrelevant here.
        return static_cast<std::uint64_t>((static_cast<unsigned __int128>((*this)()) * n) >> 64);
    }

    bool bernoulli(double p) noexcept { return uniform() < p; }

    /// Standard normal via Box-Muller (one value per call, no caching so the
    /// stream position is a pure function of the call count).
    double normal() noexcept {
        double u1 = uniform();
        const double u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

private:
    std::uint64_t base_ = 0;
    std::uint64_t counter_ = 0;
};

/// Uniform draw in [0,1) for element `index` of the stream keyed by `key`,
/// without materializing a stream. Used by dropout.
inline double keyed_uniform(std::uint64_t key, std::uint64_t index) noexcept {
    return static_cast<double>(mix64(key ^ mix64(index + 0x2545F4914F6CDD1DULL)) >> 11) * 0x1.0p-53;
}

} // namespace vlkit
