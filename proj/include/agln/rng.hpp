#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <string_view>

namespace agln {

// FNV-1a, used to derive independent streams from (seed, label) pairs.
inline std::uint64_t hash_label(std::uint64_t seed, std::string_view label) {
    std::uint64_t h = 14695981039346656037ull ^ seed;
    for (unsigned char c : label) {
        h ^= c;
        h *= 1099511628211ull;
    }
    // final mix so nearby seeds do not give nearby streams
    h ^= h >> 33;
    h *= 0xff51afd7ed558ccdull;
    h ^= h >> 33;
    return h;
}

// Deterministic RNG. std::mt19937_64 has a standard-pinned sequence; the
// distribution mappings below are ours so output is identical across
// platforms and standard libraries.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : eng_(seed) {}
    Rng(std::uint64_t seed, std::string_view label) : eng_(hash_label(seed, label)) {}

    std::uint64_t next_u64() { return eng_(); }

    // uniform in [0, 1)
    double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // uniform integer in [0, n), n >= 1
    std::uint64_t below(std::uint64_t n) { return n <= 1 ? 0 : eng_() % n; }

    // uniform integer in [lo, hi] inclusive
    int range_int(int lo, int hi) {
        return lo + static_cast<int>(below(static_cast<std::uint64_t>(hi - lo + 1)));
    }

    bool coin() { return (eng_() & 1ull) != 0; }

    // symmetric uniform in [-b, b]
    double sym(double b) { return uniform(-b, b); }

private:
    std::mt19937_64 eng_;
};

// Deterministic Fisher-Yates (std::shuffle is implementation-defined).
template <typename V>
void shuffle(V& v, Rng& rng) {
    for (std::size_t i = v.size(); i > 1; --i) {
        std::size_t j = static_cast<std::size_t>(rng.below(i));
        std::swap(v[i - 1], v[j]);
    }
}

}  // namespace agln
