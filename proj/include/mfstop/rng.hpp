#ifndef MFSTOP_RNG_HPP
#define MFSTOP_RNG_HPP

#include <cmath>
#include <cstdint>

namespace mfstop {

/**
 * Counter-based Gaussian noise source.
 *
 * Every draw is a pure function of (seed, particle, step, component), so the
 * stream layout is position-addressed: evaluation order, thread count and
 * partial replays cannot change any draw. Substreams for unrelated purposes
 * (policy evaluation noise, initial sampling) come from derived() / the
 * reserved step index below.
 */
class NoiseSource {
public:
    /// Reserved step index used when sampling initial conditions.
    static constexpr std::uint64_t kInitStream = ~std::uint64_t{0};

    explicit NoiseSource(std::uint64_t seed) : seed_(seed) {}

    std::uint64_t seed() const { return seed_; }

    /// Independent source for a named purpose; stable under reordering.
    NoiseSource derived(std::uint64_t tag) const {
        return NoiseSource(mix(seed_ ^ mix(tag + 0x71c9b75f0a3c11d7ull)));
    }

    /// Standard normal draw for (particle, step, component).
    double normal(std::uint64_t particle, std::uint64_t step, std::uint64_t component) const {
        std::uint64_t h = seed_;
        h = mix(h ^ (particle + 0x9e3779b97f4a7c15ull) * 0xff51afd7ed558ccdull);
        h = mix(h ^ (step + 0xbf58476d1ce4e5b9ull) * 0xc4ceb9fe1a85ec53ull);
        h = mix(h ^ (component + 0x94d049bb133111ebull) * 0xd6e8feb86659fd93ull);
        const std::uint64_t a = mix(h ^ 0x2545f4914f6cdd1dull);
        const std::uint64_t b = mix(h ^ 0x6a09e667f3bcc909ull);
        // Box-Muller; u0 in (0,1] so the log stays finite.
        const double u0 = (static_cast<double>(a >> 11) + 1.0) * 0x1.0p-53;
        const double u1 = static_cast<double>(b >> 11) * 0x1.0p-53;
        return std::sqrt(-2.0 * std::log(u0)) * std::cos(6.283185307179586476925286766559 * u1);
    }

private:
    static std::uint64_t mix(std::uint64_t z) {
        z ^= z >> 30;
        z *= 0xbf58476d1ce4e5b9ull;
        z ^= z >> 27;
        z *= 0x94d049bb133111ebull;
        z ^= z >> 31;
        return z;
    }

    std::uint64_t seed_;
};

} // namespace mfstop

#endif
