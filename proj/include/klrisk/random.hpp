#pragma once

#include <cstdint>
#include <random>

namespace klrisk {

using Rng = std::mt19937_64;

enum class SeedStream : std::uint64_t { Noise = 1, Probe = 2, Beta = 3, Signal = 4, Misc = 5 };

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Independent child seed for (stream, index) under a base seed.
inline std::uint64_t derive_seed(std::uint64_t base, SeedStream stream, std::uint64_t index) {
  std::uint64_t s = splitmix64(base ^ splitmix64(static_cast<std::uint64_t>(stream)));
  return splitmix64(s + splitmix64(index + 0x632be59bd9b4e019ULL));
}

}  // namespace klrisk
