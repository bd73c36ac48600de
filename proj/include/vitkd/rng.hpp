#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace vitkd {

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Deterministic RNG. All sampling is built from raw mt19937_64 draws so that
// streams are bit-identical across standard libraries and platforms
// (std::normal_distribution et al. are implementation-defined).
class Rng {
public:
    explicit Rng(uint64_t seed) : seed_(seed), engine_(seed) {}

    // Independent stream for a named purpose, reproducible from (seed, tag).
    Rng derive(uint64_t tag) const { return Rng(splitmix64(seed_ ^ splitmix64(tag))); }

    uint64_t seed() const { return seed_; }

    uint64_t next_u64() { return engine_(); }

    // Uniform in [0, 1) with 24 bits of mantissa.
    float uniform() { return static_cast<float>(next_u64() >> 40) * 0x1.0p-24f; }

    float uniform(float lo, float hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n).
    uint64_t uniform_int(uint64_t n) { return n == 0 ? 0 : next_u64() % n; }

    bool bernoulli(float p) { return uniform() < p; }

    // Box-Muller with a cached spare.
    float normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        float u1 = uniform();
        float u2 = uniform();
        if (u1 < 1e-12f) u1 = 1e-12f;
        const float r = std::sqrt(-2.0f * std::log(u1));
        const float theta = 6.28318530717958647692f * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    float normal(float mean, float stddev) { return mean + stddev * normal(); }

    // Normal(0, sigma) resampled until |x| <= 2*sigma.
    float trunc_normal(float sigma) {
        for (;;) {
            const float x = normal() * sigma;
            if (std::fabs(x) <= 2.0f * sigma) return x;
        }
    }

    // Fisher-Yates; deterministic regardless of libstdc++ version.
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            const size_t j = static_cast<size_t>(uniform_int(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    uint64_t seed_;
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    float spare_ = 0.0f;
};

}  // namespace vitkd
