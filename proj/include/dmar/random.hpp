// Seed derivation and per-stream generators. Every random quantity in the
// library is drawn from a stream keyed by (seed, index...) so results do not
// depend on thread scheduling.
#pragma once

#include <cstdint>
#include <random>

namespace dmar {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t index) {
  return splitmix64(splitmix64(base) ^ (index + 0x632be59bd9b4e019ULL));
}

inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b) {
  return derive_seed(derive_seed(base, a), b);
}

inline std::mt19937_64 make_stream(std::uint64_t base, std::uint64_t index) {
  return std::mt19937_64(derive_seed(base, index));
}

}  // namespace dmar
