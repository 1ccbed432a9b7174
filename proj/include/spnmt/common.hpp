#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

namespace spnmt {

// All tensor values, statistics and losses are double precision. Desk-scale
// models are small enough that the accuracy margin is worth more than the
// SIMD width; variance of NLLs is a small difference of large-ish numbers.
using Real = double;

// Bad user-supplied configuration (CLI exit code 1).
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed inputs to an operation: shape mismatch, out-of-vocab id, ...
struct InputError : std::runtime_error {
    explicit InputError(const std::string& msg) : std::runtime_error(msg) {}
};

// Non-finite values where finite ones are required (CLI exit code 2).
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// ---------------------------------------------------------------------------
// Seed derivation.
//
// Every source of randomness in a run is derived statelessly from the run
// seed plus a chain of tags, so adding or removing one consumer (e.g. the M
// Monte Carlo passes) never perturbs another's stream.

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t hash_combine(std::uint64_t seed, std::uint64_t tag) {
    return splitmix64(seed ^ (0x9e3779b97f4a7c15ULL + (tag << 1)));
}

inline std::uint64_t hash_tag(std::string_view name) {
    std::uint64_t h = 1469598103934665603ULL;  // FNV-1a
    for (char c : name) {
        h ^= static_cast<unsigned char>(c);
        h *= 1099511628211ULL;
    }
    return h;
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view name) {
    return hash_combine(seed, hash_tag(name));
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view name,
                                 std::uint64_t a) {
    return hash_combine(derive_seed(seed, name), a);
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view name,
                                 std::uint64_t a, std::uint64_t b) {
    return hash_combine(derive_seed(seed, name, a), b);
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view name,
                                 std::uint64_t a, std::uint64_t b, std::uint64_t c) {
    return hash_combine(derive_seed(seed, name, a, b), c);
}

// Counter-based uniform in [0,1); cheap and platform independent.
inline Real uniform01(std::uint64_t bits) {
    return static_cast<Real>(bits >> 11) * 0x1.0p-53;
}

}  // namespace spnmt
