#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>

namespace lplm::core {

// splitmix64 finalizer; also used as the stream-derivation hash.
inline uint64_t mix64(uint64_t z) {
    z += 0x9e3779b97f4a7c15ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

// Deterministic substream derivation: hash(seed, j).
inline uint64_t hash_stream(uint64_t seed, uint64_t j) {
    return mix64(seed ^ (mix64(j) + 0x9e3779b97f4a7c15ull + (seed << 6) + (seed >> 2)));
}

// Seeded splitmix64 generator. Behaviour is fixed by this code alone, so
// streams are identical across platforms and toolchains.
class Rng {
public:
    explicit Rng(uint64_t seed) : seed_(seed), state_(mix64(seed)) {}

    uint64_t next_u64() {
        ++draws_;
        state_ += 0x9e3779b97f4a7c15ull;
        uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1), 53-bit resolution.
    double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform integer in [0, n). n is always tiny compared to 2^64 here, so
    // the modulo bias is negligible and determinism is what matters.
    uint64_t next_below(uint64_t n) {
        if (n == 0) throw std::invalid_argument("next_below: n must be positive");
        return next_u64() % n;
    }

    // Standard normal via Box-Muller with a cached spare.
    double next_gauss() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        const double two_pi = 6.283185307179586476925286766559;
        double u1 = 1.0 - next_double();  // avoids log(0)
        double u2 = next_double();
        double r = std::sqrt(-2.0 * std::log(u1));
        double theta = two_pi * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    Rng substream(uint64_t j) const { return Rng(hash_stream(seed_, j)); }

    uint64_t seed() const { return seed_; }

    // Number of next_u64 calls so far (gauss may consume two).
    uint64_t draws() const { return draws_; }

private:
    uint64_t seed_;
    uint64_t state_;
    uint64_t draws_ = 0;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

// Draws index i with probability probs[i]. Consumes exactly one uniform draw.
// Throws on negative entries or if the entries do not sum to 1 within 1e-9.
int sample_categorical(std::span<const double> probs, Rng& rng);

}  // namespace lplm::core
