#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace ap {

// All randomness in the toolkit flows through RandomStream so that results do
// not depend on the standard library's distribution implementations. Streams
// are derived from a master seed plus a stage label and item indices, which
// keeps parallel execution order out of the picture.

inline std::uint64_t splitmix64(std::uint64_t& state) {
    state += 0x9e3779b97f4a7c15ULL;
    std::uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

inline std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

class RandomStream {
public:
    explicit RandomStream(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    // Unbiased integer in [0, n) via rejection sampling.
    std::uint64_t below(std::uint64_t n) {
        if (n == 0) return 0;
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t v;
        do {
            v = engine_();
        } while (v >= limit);
        return v % n;
    }

    std::size_t index(std::size_t n) { return static_cast<std::size_t>(below(n)); }

    // Uniform in [0, 1) with 53 random bits.
    double real01() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    // Box-Muller without the cached spare, so draws map 1:1 to engine state.
    double normal(double mean = 0.0, double stddev = 1.0) {
        double u1 = real01();
        double u2 = real01();
        double r = std::sqrt(-2.0 * std::log(1.0 - u1));
        return mean + stddev * r * std::cos(2.0 * M_PI * u2);
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = index(i);
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::mt19937_64 engine_;
};

// Deterministic stream derivation: master seed -> (stage, item, sub) stream.
inline std::uint64_t derive_seed(std::uint64_t master, std::string_view label,
                                 std::uint64_t a = 0, std::uint64_t b = 0) {
    std::uint64_t s = master ^ fnv1a64(label);
    std::uint64_t out = splitmix64(s);
    s ^= a + 0x9e3779b97f4a7c15ULL;
    out ^= splitmix64(s);
    s ^= b + 0x7f4a7c159e3779b9ULL;
    out ^= splitmix64(s);
    return out;
}

inline RandomStream derive_stream(std::uint64_t master, std::string_view label,
                                  std::uint64_t a = 0, std::uint64_t b = 0) {
    return RandomStream(derive_seed(master, label, a, b));
}

} // namespace ap
