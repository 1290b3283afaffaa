#pragma once

#include <cstdint>
#include <random>

namespace nesy {

using Rng = std::mt19937_64;

/// splitmix64 finalizer.
inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Seed for substream `stream`, item `index` of a master seed. Every
/// independently seeded generator in the project is derived this way.
inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t stream, std::uint64_t index = 0) {
  return mix64(mix64(mix64(master) ^ stream) ^ index);
}

inline Rng make_rng(std::uint64_t master, std::uint64_t stream, std::uint64_t index = 0) {
  return Rng(derive_seed(master, stream, index));
}

/// Uniform double in [0,1) using the top 53 bits; portable across standard
/// library implementations, unlike std::uniform_real_distribution.
inline double uniform01(Rng& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

}  // namespace nesy
