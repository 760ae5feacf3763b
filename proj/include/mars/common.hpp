#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>

namespace mars {

using real = double;

// Error taxonomy. Every failure the library reports is one of these five.
struct ShapeError : std::runtime_error { using std::runtime_error::runtime_error; };
struct NumericError : std::runtime_error { using std::runtime_error::runtime_error; };
struct ConfigError : std::runtime_error { using std::runtime_error::runtime_error; };
struct DataError : std::runtime_error { using std::runtime_error::runtime_error; };
struct IoError : std::runtime_error { using std::runtime_error::runtime_error; };

inline uint64_t fnv1a64(std::string_view s) {
  uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

// Stream-splitting RNG: each named consumer gets an independent engine that
// depends only on (seed, tag), so adding or removing one consumer never
// shifts another's draws.
inline std::mt19937_64 seeded_rng(uint64_t seed, std::string_view tag) {
  uint64_t h = fnv1a64(tag);
  h ^= (seed + 0x9e3779b97f4a7c15ull) * 0xbf58476d1ce4e5b9ull;
  return std::mt19937_64(h);
}

}  // namespace mars
