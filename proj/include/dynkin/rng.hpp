#pragma once

#include <cmath>
#include <cstdint>
#include <limits>

namespace dynkin {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

/// Stream-derivation rule: every sub-stream key is a splitmix64 hash chain of
/// the master seed and the integer tags that identify the consumer (path
/// index, signal stream id, purpose). Results therefore never depend on the
/// order in which paths are scheduled.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a) {
    return splitmix64(splitmix64(seed) ^ (a * 0xD1B54A32D192ED03ULL + 0x8CB92BA72F3D8DD7ULL));
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
    return derive_seed(derive_seed(seed, a), b);
}

/// Counter-based generator: the n-th output is splitmix64(key + n * golden).
/// Satisfies UniformRandomBitGenerator so std distributions can consume it.
class CounterRng {
public:
    using result_type = std::uint64_t;

    explicit CounterRng(std::uint64_t key) : key_(key) {}

    static constexpr result_type min() { return 0; }
    static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }

    result_type operator()() {
        ++counter_;
        return splitmix64(key_ + counter_ * 0x9E3779B97F4A7C15ULL);
    }

    // Uniform on [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>((*this)() >> 11) * 0x1.0p-53; }

    // Exponential with the given rate by inversion.
    double exponential(double rate) { return -std::log1p(-uniform()) / rate; }

    std::uint64_t key() const { return key_; }

private:
    std::uint64_t key_;
    std::uint64_t counter_ = 0;
};

}  // namespace dynkin
