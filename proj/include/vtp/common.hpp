// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <stdexcept>
#include <string>

namespace vtp {

// Row-major so serialized buffers match the declared on-disk layout directly.
using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vec = Eigen::VectorXd;

// Tolerance for "sums to one" checks on probability vectors and attention rows.
inline constexpr double kSimplexTol = 1e-9;

// Malformed or inconsistent run configuration. CLI exit code 2.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// A pipeline stage input that is absent, unreadable, or produced under a
// different configuration. CLI exit code 3.
struct MissingArtifactError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Persisted data whose schema version or structure does not match this build.
struct SchemaError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// A backward pass fed with a forward cache from a different network shape.
struct StaleCacheError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw std::invalid_argument(msg);
}

inline bool is_simplex(const Vec& v, double tol = kSimplexTol) {
    if (v.size() == 0) return false;
    if ((v.array() < -tol).any()) return false;
    return std::abs(v.sum() - 1.0) <= tol;
}

// FNV-1a, 64-bit. Stable content fingerprint for config hashes; not crypto.
inline std::uint64_t fnv1a64(const std::string& s) {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

inline std::string to_hex(std::uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[static_cast<std::size_t>(i)] = digits[v & 0xf];
        v >>= 4;
    }
    return out;
}

}  // namespace vtp
