#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace storyflow {

// Deterministic RNG. All distributions are implemented on top of the raw
// mt19937_64 stream so that results are reproducible bit-for-bit for a given
// seed, independent of the standard library's distribution internals.
class Rng {
public:
    explicit Rng(uint64_t seed) : gen_(seed), seed_mix_(seed) {}

    // Uniform double in [0, 1).
    double uniform() {
        return std::ldexp(static_cast<double>(gen_() >> 11), -53);
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Standard normal via Box-Muller (pairs cached).
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 2.0 * M_PI * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    // Uniform integer in [0, n).
    uint64_t integer(uint64_t n) { return gen_() % n; }

    // Derive an independent stream; used to give parallel workers their own
    // deterministic sequences regardless of scheduling.
    Rng fork(uint64_t stream) const {
        uint64_t x = seed_mix_ ^ (0x9e3779b97f4a7c15ULL * (stream + 1));
        x ^= x >> 30;
        x *= 0xbf58476d1ce4e5b9ULL;
        x ^= x >> 27;
        x *= 0x94d049bb133111ebULL;
        x ^= x >> 31;
        return Rng(x);
    }

private:
    std::mt19937_64 gen_;
    uint64_t seed_mix_ = 0;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace storyflow
