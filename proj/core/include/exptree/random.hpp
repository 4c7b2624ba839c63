#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>

namespace exptree {

/// Seeded stream with conversions defined here rather than by the standard library's
/// distributions, so sequences are identical across toolchains.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}

    std::uint64_t bits() { return gen_(); }
    /// Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }
    /// Uniform integer in [0, n).
    std::size_t index(std::size_t n) {
        __extension__ using wide = unsigned __int128;
        return static_cast<std::size_t>((static_cast<wide>(gen_()) * n) >> 64);
    }
    double normal() {
        const double u1 = 1.0 - uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

private:
    std::mt19937_64 gen_;
};

/// splitmix64 finalizer; derives independent seeds from (seed, stream) pairs.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

}  // namespace exptree
