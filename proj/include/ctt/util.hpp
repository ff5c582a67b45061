#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace ctt {

// Log-space sentinel for "no path". Saturating: adding finite values to it
// keeps it far below any real log-probability.
constexpr double kLogZero = -1e30;

inline bool is_log_zero(double x) { return x <= kLogZero * 0.5; }

inline double log_add_exp(double a, double b) {
    if (is_log_zero(a)) return b;
    if (is_log_zero(b)) return a;
    if (a < b) std::swap(a, b);
    return a + std::log1p(std::exp(b - a));
}

// Deterministic RNG used everywhere instead of std distributions, so that
// seeded runs reproduce bit-for-bit across standard libraries.
class Rng {
  public:
    explicit Rng(std::uint64_t seed = 0x9e3779b97f4a7c15ull) {
        // splitmix64 seeding
        std::uint64_t z = seed;
        for (auto& s : state_) {
            z += 0x9e3779b97f4a7c15ull;
            std::uint64_t x = z;
            x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
            x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
            s = x ^ (x >> 31);
        }
    }

    std::uint64_t next_u64() {
        // xoshiro256**
        const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
        const std::uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    // uniform in [0, 1)
    double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

    // uniform in [lo, hi)
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // uniform integer in [0, n)
    std::uint64_t uniform_int(std::uint64_t n) {
        if (n == 0) throw std::invalid_argument("Rng::uniform_int: n must be > 0");
        return next_u64() % n;  // modulo bias irrelevant at these ranges
    }

    // standard normal via Box-Muller (no cached spare, fully deterministic)
    double normal() {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    double normal(double mean, double std) { return mean + std * normal(); }

  private:
    static std::uint64_t rotl(std::uint64_t x, int k) {
        return (x << k) | (x >> (64 - k));
    }
    std::uint64_t state_[4];
};

inline std::string shape_str(const std::vector<long>& shape) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ", ";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

// log(n choose k) computed by exact summation; n stays small at desk scale.
inline double log_binomial(long n, long k) {
    if (k < 0 || k > n) return kLogZero;
    double acc = 0.0;
    for (long i = 1; i <= k; ++i) {
        acc += std::log(double(n - k + i)) - std::log(double(i));
    }
    return acc;
}

}  // namespace ctt
