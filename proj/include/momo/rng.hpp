#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <vector>

namespace momo {

// splitmix64 step; used to derive independent seed streams from a master
// seed plus a list of tags (stage, epoch, step, purpose...). Keyed streams
// make every stochastic choice a pure function of (seed, tags), which is
// what checkpoint-resume determinism relies on.
inline uint64_t mix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline uint64_t derive_seed(uint64_t seed, std::initializer_list<uint64_t> tags) {
    uint64_t s = mix64(seed);
    for (uint64_t t : tags) s = mix64(s ^ (t + 0x632be59bd9b4e019ULL));
    return s;
}

// Deterministic RNG. Distributions are hand-rolled on top of mt19937_64 so
// the draw sequence is pinned (std:: distribution objects are not guaranteed
// identical across standard libraries).
class Rng {
public:
    explicit Rng(uint64_t seed = 0) : eng_(seed) {}

    static Rng keyed(uint64_t seed, std::initializer_list<uint64_t> tags) {
        return Rng(derive_seed(seed, tags));
    }

    uint64_t next_u64() { return eng_(); }

    // uniform in [0, 1)
    double uniform() {
        return static_cast<double>(eng_() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // inclusive range [lo, hi]
    int64_t uniform_int(int64_t lo, int64_t hi) {
        uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
        return lo + static_cast<int64_t>(eng_() % span);
    }

    bool bernoulli(double p) { return uniform() < p; }

    // Box-Muller; one value per call (the pair's second half is discarded to
    // keep the stream position independent of call parity).
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 1e-300) u1 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
    }

    double truncated_normal(double sigma, double clip_sigmas = 2.0) {
        double v = normal();
        while (std::abs(v) > clip_sigmas) v = normal();
        return v * sigma;
    }

    // Fisher-Yates over [0, n)
    std::vector<int> permutation(int n) {
        std::vector<int> p(n);
        for (int i = 0; i < n; ++i) p[i] = i;
        for (int i = n - 1; i > 0; --i) {
            int j = static_cast<int>(uniform_int(0, i));
            std::swap(p[i], p[j]);
        }
        return p;
    }

private:
    std::mt19937_64 eng_;
};

}  // namespace momo
