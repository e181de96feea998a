#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <vector>

namespace istar::rng {

// splitmix64: fast, well-mixed 64-bit integer hash. Used to derive
// independent deterministic seed streams from (master_seed, tags...).
inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Stream purposes. Keeping streams separate means e.g. PRM training never
// perturbs the env/rollout randomness of an otherwise identical run.
enum class Stream : std::uint64_t {
    PolicyInit = 1,
    TaskSeed = 2,
    Rollout = 3,
    PairSubsample = 4,
    PrmShuffle = 5,
    PolicyShuffle = 6,
    Eval = 7,
    EnvGen = 8,
    GradCheck = 9,
};

inline std::uint64_t derive(std::uint64_t seed, std::initializer_list<std::uint64_t> tags) {
    std::uint64_t h = splitmix64(seed);
    for (std::uint64_t t : tags) {
        h = splitmix64(h ^ splitmix64(t));
    }
    return h;
}

inline std::uint64_t derive(std::uint64_t seed, Stream s,
                            std::uint64_t a = 0, std::uint64_t b = 0, std::uint64_t c = 0) {
    return derive(seed, {static_cast<std::uint64_t>(s), a, b, c});
}

inline std::mt19937_64 make_stream(std::uint64_t seed, Stream s,
                                   std::uint64_t a = 0, std::uint64_t b = 0, std::uint64_t c = 0) {
    return std::mt19937_64(derive(seed, s, a, b, c));
}

// Unbiased integer in [0, n). Hand-rolled so results do not depend on the
// standard library's distribution implementation.
inline std::uint64_t uniform_u64(std::mt19937_64& g, std::uint64_t n) {
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    std::uint64_t x;
    do {
        x = g();
    } while (x >= limit);
    return x % n;
}

inline int uniform_int(std::mt19937_64& g, int lo, int hi_inclusive) {
    return lo + static_cast<int>(uniform_u64(g, static_cast<std::uint64_t>(hi_inclusive - lo + 1)));
}

// Uniform double in [0, 1) with 53 bits of randomness.
inline double uniform_real(std::mt19937_64& g) {
    return static_cast<double>(g() >> 11) * 0x1.0p-53;
}

// Sample an index from an explicit probability vector (values sum to ~1).
inline int sample_categorical(std::mt19937_64& g, const std::vector<double>& probs) {
    const double u = uniform_real(g);
    double acc = 0.0;
    for (std::size_t i = 0; i < probs.size(); ++i) {
        acc += probs[i];
        if (u < acc) return static_cast<int>(i);
    }
    return static_cast<int>(probs.size()) - 1;
}

template <typename T>
inline void shuffle(std::mt19937_64& g, std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
        std::size_t j = uniform_u64(g, i);
        std::swap(v[i - 1], v[j]);
    }
}

}  // namespace istar::rng
