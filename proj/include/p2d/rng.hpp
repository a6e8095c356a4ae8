#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <vector>

namespace p2d {

// Seeded RNG with self-contained sampling routines. std::*_distribution is
// implementation-defined, so drawing logic lives here to keep artifacts
// bit-reproducible against stdlib changes.
class Rng {
public:
    explicit Rng(uint64_t seed) : gen_(seed) {}

    uint64_t next() { return gen_(); }

    // n must be > 0. Modulo bias is < 2^-40 for every n used here.
    uint64_t below(uint64_t n) { return gen_() % n; }

    int64_t index(int64_t n) { return static_cast<int64_t>(below(static_cast<uint64_t>(n))); }

    double real01() {
        return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
    }

    // Box-Muller, cosine branch only: exactly two draws per call.
    double normal(double mean = 0.0, double stddev = 1.0) {
        const double u1 = real01();
        const double u2 = real01();
        const double r = std::sqrt(-2.0 * std::log(1.0 - u1));
        return mean + stddev * r * std::cos(2.0 * std::numbers::pi * u2);
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            const size_t j = static_cast<size_t>(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    std::vector<int64_t> perm(int64_t n) {
        std::vector<int64_t> p(static_cast<size_t>(n));
        for (int64_t i = 0; i < n; ++i) p[static_cast<size_t>(i)] = i;
        shuffle(p);
        return p;
    }

    // Sample k distinct indices from [0, n) (k <= n), order randomized.
    std::vector<int64_t> choose(int64_t n, int64_t k) {
        std::vector<int64_t> p = perm(n);
        p.resize(static_cast<size_t>(k));
        return p;
    }

private:
    std::mt19937_64 gen_;
};

// Derives independent stream seeds from one run seed (splitmix64 step).
inline uint64_t derive_seed(uint64_t seed, uint64_t stream) {
    uint64_t z = seed + 0x9e3779b97f4a7c15ull * (stream + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

}  // namespace p2d
