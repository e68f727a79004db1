#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace manpp {

using Rng = std::mt19937_64;

// One run seed fans out into independent named streams ("init",
// "data", "shuffle", ...). Each stream is seeded by splitmix64 over the run
// seed xor an FNV-1a hash of the stream name.
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ull;
  }
  return h;
}

inline Rng make_stream(std::uint64_t seed, std::string_view name) {
  return Rng(splitmix64(seed ^ fnv1a(name)));
}

}  // namespace manpp
