#pragma once

// Counter-based 64-bit PRNG (splitmix64 finalizer over a keyed counter).
// Every random quantity in the project is derived from (seed, counter)
// pairs, so identical seeds reproduce identical streams on any platform.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <vector>

namespace bninvert::rng {

inline std::uint64_t mix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Derive a child seed, e.g. per-batch or per-tensor streams.
inline std::uint64_t derive(std::uint64_t seed, std::uint64_t index) {
    return mix64(seed ^ mix64(index + 0x632be59bd9b4e019ULL));
}

// i-th 64-bit word of the stream keyed by `seed`.
inline std::uint64_t word(std::uint64_t seed, std::uint64_t i) {
    return mix64(seed + i * 0x9e3779b97f4a7c15ULL);
}

// Uniform in (0, 1], 53-bit resolution. Never zero, so log() is safe.
inline double uniform01(std::uint64_t seed, std::uint64_t i) {
    return static_cast<double>((word(seed, i) >> 11) + 1) * 0x1.0p-53;
}

// i-th standard-normal variate via Box-Muller (cosine branch only).
// Element i consumes uniform words 2i and 2i+1; tensors are filled in
// row-major order, so the stream layout matches the element layout.
inline double normal(std::uint64_t seed, std::uint64_t i) {
    const double u1 = uniform01(seed, 2 * i);
    const double u2 = uniform01(seed, 2 * i + 1);
    const double r = std::sqrt(-2.0 * std::log(u1));
    return r * std::cos(2.0 * std::numbers::pi * u2);
}

// Uniform integer in [0, n), n > 0.
inline std::uint64_t below(std::uint64_t seed, std::uint64_t i, std::uint64_t n) {
    return word(seed, i) % n;
}

// Deterministic Fisher-Yates shuffle.
template <class T>
void shuffle(std::vector<T>& v, std::uint64_t seed) {
    for (std::size_t i = v.size(); i > 1; --i) {
        std::size_t j = static_cast<std::size_t>(below(seed, i, i));
        std::swap(v[i - 1], v[j]);
    }
}

}  // namespace bninvert::rng
