#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

// Shared plumbing: error taxonomy, deterministic RNG, small helpers.

namespace nfkit {

// Error taxonomy. The CLI maps param/format/contract errors to exit code 2
// and numeric/runtime failures to exit code 3.
struct shape_error : std::runtime_error {
    explicit shape_error(const std::string& msg) : std::runtime_error(msg) {}
};
struct format_error : std::runtime_error {
    explicit format_error(const std::string& msg) : std::runtime_error(msg) {}
};
struct param_error : std::runtime_error {
    explicit param_error(const std::string& msg) : std::runtime_error(msg) {}
};
struct contract_error : std::runtime_error {
    explicit contract_error(const std::string& msg) : std::runtime_error(msg) {}
};
struct numeric_error : std::runtime_error {
    explicit numeric_error(const std::string& msg) : std::runtime_error(msg) {}
};

// Counter-based deterministic RNG (splitmix64 core). Streams derived via
// child() are independent of call order, which keeps per-step training
// randomness reproducible under checkpoint resume.
class Rng {
  public:
    explicit Rng(std::uint64_t seed) : state_(mix_(seed ^ 0x9e3779b97f4a7c15ULL)) {}

    std::uint64_t next_u64() {
        state_ += 0x9e3779b97f4a7c15ULL;
        return mix_(state_);
    }

    // Uniform in [0, 1).
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Integer in [0, n).
    std::uint64_t uniform_index(std::uint64_t n) {
        // Rejection-free modulo is fine here: n is tiny relative to 2^64.
        return next_u64() % n;
    }

    // Standard normal via Box-Muller (no cached spare; keeps the stream
    // position a pure function of the number of calls).
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        if (u1 <= 0.0) u1 = 0x1.0p-53;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    // Derived stream; deterministic in (parent seed material, tag).
    Rng child(std::uint64_t tag) const {
        Rng r(0);
        r.state_ = mix_(state_ ^ mix_(tag + 0x632be59bd9b4e019ULL));
        return r;
    }

    // Fisher-Yates over indices [0, n).
    std::vector<std::size_t> permutation(std::size_t n) {
        std::vector<std::size_t> idx(n);
        for (std::size_t i = 0; i < n; ++i) idx[i] = i;
        for (std::size_t i = n; i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(uniform_index(i));
            std::swap(idx[i - 1], idx[j]);
        }
        return idx;
    }

  private:
    static std::uint64_t mix_(std::uint64_t z) {
        z += 0x9e3779b97f4a7c15ULL;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    std::uint64_t state_;
};

inline void check_finite(const std::vector<double>& v, const char* what) {
    for (double x : v) {
        if (!std::isfinite(x)) throw numeric_error(std::string(what) + ": non-finite value");
    }
}

// Worker cap from NFKIT_THREADS; defaults to 1.
std::size_t worker_count();

}  // namespace nfkit
