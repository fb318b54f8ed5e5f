#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <random>
#include <string_view>
#include <vector>

namespace gradtrace {

// 64-bit FNV-1a, the project-wide content hash (checkpoints, seeds, caches).
inline constexpr uint64_t kFnvOffset = 14695981039346656037ULL;
inline constexpr uint64_t kFnvPrime = 1099511628211ULL;

inline uint64_t fnv1a64(const void* data, size_t len, uint64_t h = kFnvOffset) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= kFnvPrime;
    }
    return h;
}

inline uint64_t fnv1a64(std::string_view s, uint64_t h = kFnvOffset) {
    return fnv1a64(s.data(), s.size(), h);
}

inline uint64_t fnv1a64_u64(uint64_t v, uint64_t h = kFnvOffset) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    return fnv1a64(b, 8, h);
}

// Derived sub-stream seeds: hash(seed, stream) so shuffles, dataset splits and
// probe generation never share a stream.
inline uint64_t derive_seed(uint64_t seed, uint64_t stream) {
    return fnv1a64_u64(stream, fnv1a64_u64(seed));
}

inline uint64_t derive_seed(uint64_t seed, std::string_view tag) {
    return fnv1a64(tag, fnv1a64_u64(seed));
}

// Deterministic RNG wrapper. std::mt19937_64 is fully specified by the
// standard; the value mappings below are hand-rolled so sampled doubles and
// indices are bit-identical across standard libraries too.
class Rng {
public:
    explicit Rng(uint64_t seed) : gen_(seed) {}

    uint64_t next_u64() { return gen_(); }

    // uniform in [0, 1) with 53 random bits
    double uniform() {
        return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
    }

    // standard normal via Box-Muller
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        if (u1 <= 0.0) u1 = 0x1.0p-53;
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    // uniform index in [0, n); n must be > 0. Modulo bias is irrelevant for
    // the tiny ranges used here and keeps the mapping trivially portable.
    size_t below(size_t n) {
        return static_cast<size_t>(gen_() % static_cast<uint64_t>(n));
    }

private:
    std::mt19937_64 gen_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

template <typename T>
void fisher_yates(std::vector<T>& v, Rng& rng) {
    for (size_t i = v.size(); i > 1; --i) {
        size_t j = rng.below(i);
        std::swap(v[i - 1], v[j]);
    }
}

} // namespace gradtrace
