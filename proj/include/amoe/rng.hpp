// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace amoe {

// Single RNG type everywhere so runs replay bit-for-bit from one seed.
using Rng = std::mt19937_64;

// Derives an independent stream seed from a master seed and a purpose label
// (FNV-1a over the label, mixed with the master). Stable across platforms.
inline std::uint64_t derive_seed(std::uint64_t master, std::string_view purpose) {
  std::uint64_t h = 14695981039346656037ull;
  for (char c : purpose) {
    h ^= static_cast<std::uint64_t>(static_cast<unsigned char>(c));
    h *= 1099511628211ull;
  }
  h ^= master + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
  // splitmix64 finalizer
  h ^= h >> 30;
  h *= 0xbf58476d1ce4e5b9ull;
  h ^= h >> 27;
  h *= 0x94d049bb133111ebull;
  h ^= h >> 31;
  return h;
}

inline Rng make_rng(std::uint64_t master, std::string_view purpose) {
  return Rng(derive_seed(master, purpose));
}

}  // namespace amoe
