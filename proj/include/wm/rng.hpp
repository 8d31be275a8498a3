#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace wm {

// FNV-1a, 64-bit. Used wherever a stable, platform-independent hash is needed
// (stream derivation, key -> bias seed, weight checksums, config hashes).
inline uint64_t fnv1a64(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

inline uint64_t fnv1a64(const std::string& s, uint64_t h = 0xcbf29ce484222325ull) {
    return fnv1a64(s.data(), s.size(), h);
}

// Deterministic RNG. mt19937_64 is fully specified by the standard; all
// mappings from raw draws to distributions are implemented here (never via
// std::uniform_real_distribution etc., whose output is implementation-defined)
// so that identical seeds give identical streams on any conforming platform.
class Rng {
public:
    explicit Rng(uint64_t seed) : eng_(seed) {}

    uint64_t raw() { return eng_(); }

    // [0, 1): 53 high bits scaled.
    double uniform() { return (eng_() >> 11) * 0x1.0p-53; }

    // (0, 1): strictly positive, safe under log().
    double uniform_open() { return ((eng_() >> 11) + 0.5) * 0x1.0p-53; }

    // Standard Gumbel: g = -log(-log u), u in (0,1).
    double gumbel() { return -std::log(-std::log(uniform_open())); }

    // Box-Muller; consumes exactly two draws per call (no caching, so the
    // draw count per call is fixed and streams stay reproducible).
    double gaussian() {
        double u1 = uniform_open();
        double u2 = uniform_open();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
    }

    // Integer in [0, n).
    uint64_t below(uint64_t n) {
        if (n == 0) throw std::invalid_argument("Rng::below: n must be positive");
        return static_cast<uint64_t>((static_cast<__uint128_t>(eng_()) * n) >> 64);
    }

    // Index drawn from an unnormalised non-negative weight vector.
    size_t choice(const std::vector<double>& w) {
        double total = 0;
        for (double x : w) total += x;
        if (!(total > 0)) throw std::invalid_argument("Rng::choice: weights must have positive mass");
        double u = uniform() * total;
        double acc = 0;
        for (size_t i = 0; i < w.size(); ++i) {
            acc += w[i];
            if (u < acc) return i;
        }
        return w.size() - 1;
    }

    std::string state() const {
        std::ostringstream os;
        os << eng_;
        return os.str();
    }

    void set_state(const std::string& s) {
        std::istringstream is(s);
        is >> eng_;
        if (!is) throw std::runtime_error("Rng::set_state: malformed state string");
    }

private:
    std::mt19937_64 eng_;
};

// Stateless stream derivation: a named substream of (seed, parts...) is fully
// determined by its labels, so any point in a run can be reproduced without
// replaying earlier draws.
inline uint64_t derive_seed(uint64_t seed, const std::string& label, uint64_t a = 0, uint64_t b = 0) {
    uint64_t h = fnv1a64(label);
    h = fnv1a64(&seed, sizeof seed, h);
    h = fnv1a64(&a, sizeof a, h);
    h = fnv1a64(&b, sizeof b, h);
    return h;
}

inline Rng derive_rng(uint64_t seed, const std::string& label, uint64_t a = 0, uint64_t b = 0) {
    return Rng(derive_seed(seed, label, a, b));
}

}  // namespace wm
