#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace kinemask {

namespace fs = std::filesystem;

// Error categories map onto the CLI exit codes.
enum class ErrKind { usage = 1, data = 2, training = 3, acceptance = 4 };

class Error : public std::runtime_error {
public:
    Error(ErrKind kind, const std::string& msg) : std::runtime_error(msg), kind_(kind) {}
    ErrKind kind() const { return kind_; }

private:
    ErrKind kind_;
};

#define KM_CHECK(cond, kind, msg)                                        \
    do {                                                                 \
        if (!(cond)) {                                                   \
            std::ostringstream oss__;                                    \
            oss__ << msg;                                                \
            throw ::kinemask::Error(::kinemask::ErrKind::kind, oss__.str()); \
        }                                                                \
    } while (0)

/// Deterministic RNG with explicit sampling, so results do not depend on
/// libstdc++'s distribution implementations. splitmix64-seeded xoshiro-style
/// core via std::mt19937_64 kept out on purpose: the raw generator below is
/// stable across compilers.
class Rng {
public:
    explicit Rng(uint64_t seed) {
        // splitmix64 expansion of the seed into the 4-word state
        uint64_t x = seed;
        for (auto& s : state_) {
            x += 0x9E3779B97f4A7C15ULL;
            uint64_t z = x;
            z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
            z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
            s = z ^ (z >> 31);
        }
        has_spare_ = false;
    }

    uint64_t next_u64() {
        // xoshiro256**
        auto rotl = [](uint64_t v, int k) { return (v << k) | (v >> (64 - k)); };
        uint64_t result = rotl(state_[1] * 5, 7) * 9;
        uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    /// Uniform in [0, 1).
    double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

    /// Uniform in [lo, hi).
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n).
    int64_t below(int64_t n) { return int64_t(uniform() * double(n)) % n; }

    /// Standard normal via Box-Muller (pairs cached).
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        while (u1 <= 0.0) u1 = uniform();
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double th = 2.0 * M_PI * u2;
        spare_ = r * std::sin(th);
        has_spare_ = true;
        return r * std::cos(th);
    }

private:
    uint64_t state_[4];
    double spare_ = 0.0;
    bool has_spare_;
};

/// FNV-1a 64-bit over raw bytes; used for checkpoint fingerprints and
/// derived seeds.
inline uint64_t fnv1a(const void* bytes, size_t n, uint64_t h = 0xcbf29ce484222325ULL) {
    const auto* p = static_cast<const unsigned char*>(bytes);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline uint64_t fnv1a(const std::string& s, uint64_t h = 0xcbf29ce484222325ULL) {
    return fnv1a(s.data(), s.size(), h);
}

inline std::string hex64(uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return std::string(buf);
}

/// Stable per-item seed derivation (master seed + tag + index).
inline uint64_t derive_seed(uint64_t master, const std::string& tag, uint64_t index) {
    uint64_t h = fnv1a(tag);
    h = fnv1a(&master, sizeof master, h);
    h = fnv1a(&index, sizeof index, h);
    return h ? h : 1;
}

inline std::string read_text_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    KM_CHECK(in.good(), data, "cannot open " << path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void write_text_file(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    KM_CHECK(out.good(), data, "cannot write " << path.string());
    out << text;
    KM_CHECK(out.good(), data, "short write to " << path.string());
}

template <typename T>
T clamp(T v, T lo, T hi) {
    return v < lo ? lo : (v > hi ? hi : v);
}

}  // namespace kinemask
