#pragma once
// Shared primitives: scalar/matrix aliases, grid geometry, error categories and
// a portable deterministic random source.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <numbers>
#include <stdexcept>
#include <string>
#include <string_view>

namespace maxquery {

using Real = double;
using Matrix = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic>;
using Vector = Eigen::Matrix<Real, Eigen::Dynamic, 1>;
using RowVector = Eigen::Matrix<Real, 1, Eigen::Dynamic>;

/// Failure categories; the CLI maps each to a distinct exit code.
enum class ErrorCategory { Config, Data, Shape, Numeric, Io };

inline constexpr std::string_view to_string(ErrorCategory c) {
    switch (c) {
        case ErrorCategory::Config: return "config";
        case ErrorCategory::Data: return "data";
        case ErrorCategory::Shape: return "shape";
        case ErrorCategory::Numeric: return "numeric";
        case ErrorCategory::Io: return "io";
    }
    return "unknown";
}

class Error : public std::runtime_error {
public:
    Error(ErrorCategory category, const std::string& what)
        : std::runtime_error(what), category_(category) {}
    ErrorCategory category() const noexcept { return category_; }

private:
    ErrorCategory category_;
};

[[noreturn]] inline void fail(ErrorCategory c, const std::string& what) { throw Error(c, what); }

inline void require(bool cond, ErrorCategory c, const std::string& what) {
    if (!cond) fail(c, what);
}

/// Voxel grid H x W x D; D == 1 is 2D mode. Flattening is row-major:
/// index = (h * W + w) * D + d.
struct GridShape {
    int h = 0;
    int w = 0;
    int d = 1;

    constexpr int voxels() const { return h * w * d; }
    constexpr bool volumetric() const { return d > 1; }
    constexpr int index(int ih, int iw, int id) const { return (ih * w + iw) * d + id; }

    /// Shape after downsampling by `stride` along every spatial axis with
    /// extent > 1 (depth is left alone in 2D mode).
    constexpr GridShape downsampled(int stride) const {
        return {h / stride, w / stride, d > 1 ? d / stride : 1};
    }
    constexpr bool divisible_by(int stride) const {
        return h % stride == 0 && w % stride == 0 && (d == 1 || d % stride == 0);
    }

    friend constexpr bool operator==(const GridShape&, const GridShape&) = default;
};

inline std::string to_string(const GridShape& g) {
    return std::to_string(g.h) + "x" + std::to_string(g.w) + "x" + std::to_string(g.d);
}

/// SplitMix64 finalizer; used to derive independent child seeds.
inline constexpr std::uint64_t mix_seed(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline constexpr std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
    return mix_seed(mix_seed(a) ^ (b + 0x632be59bd9b4e019ULL));
}

/// Deterministic random source: a SplitMix64 stream with hand-written
/// distributions, so sequences do not depend on the standard library vendor.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(mix_seed(seed)) {}

    std::uint64_t next_u64() {
        state_ += 0x9e3779b97f4a7c15ULL;
        std::uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    /// Uniform in [0, 1).
    Real uniform() { return static_cast<Real>(next_u64() >> 11) * 0x1.0p-53; }
    Real uniform(Real lo, Real hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [lo, hi].
    int uniform_int(int lo, int hi) {
        const auto span = static_cast<std::uint64_t>(hi - lo) + 1;
        return lo + static_cast<int>(next_u64() % span);
    }

    Real normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        Real u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const Real u2 = uniform();
        const Real r = std::sqrt(-2.0 * std::log(u1));
        const Real theta = 2.0 * std::numbers::pi * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }
    Real normal(Real mean, Real stddev) { return mean + stddev * normal(); }

private:
    std::uint64_t state_;
    Real spare_ = 0.0;
    bool has_spare_ = false;
};

/// FNV-1a 64-bit over a byte string.
inline constexpr std::uint64_t fnv1a64(std::string_view bytes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

}  // namespace maxquery
