#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace hybridlm {

// All randomness in a run flows from one root seed. Substreams are derived by
// hashing a purpose name into the seed, so e.g. the "convert.dt_a_d" stream
// draws the same values whether or not another stream was consumed first.
class Rng {
public:
    explicit Rng(uint64_t seed) : engine_(mix(seed, 0x9e3779b97f4a7c15ull)), seed_(seed) {}

    Rng stream(std::string_view name) const {
        return Rng(mix(seed_, fnv1a(name)));
    }

    uint64_t seed() const { return seed_; }

    double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }

    double uniform(double lo, double hi) {
        return std::uniform_real_distribution<double>(lo, hi)(engine_);
    }

    double normal(double mean = 0.0, double stddev = 1.0) {
        return std::normal_distribution<double>(mean, stddev)(engine_);
    }

    // Uniform integer in [0, n).
    int64_t below(int64_t n) {
        return std::uniform_int_distribution<int64_t>(0, n - 1)(engine_);
    }

    template <typename It>
    void shuffle(It first, It last) {
        std::shuffle(first, last, engine_);
    }

    std::mt19937_64& engine() { return engine_; }

private:
    static uint64_t fnv1a(std::string_view s) {
        uint64_t h = 0xcbf29ce484222325ull;
        for (unsigned char c : s) {
            h ^= c;
            h *= 0x100000001b3ull;
        }
        return h;
    }

    // splitmix64 finalizer
    static uint64_t mix(uint64_t a, uint64_t b) {
        uint64_t z = a + 0x9e3779b97f4a7c15ull * (b | 1);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    std::mt19937_64 engine_;
    uint64_t seed_;
};

}  // namespace hybridlm
