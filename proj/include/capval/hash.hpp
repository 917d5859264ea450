// hash.hpp: stable content hashing for request keys and cache addressing.
//
// FNV-1a evaluated twice with distinct offset bases gives a 128-bit digest
// that is stable across platforms and runs. Cache entries additionally store
// the full request payload and verify it on read, so a digest collision can
// never produce a wrong answer.

#pragma once

#include <cstdint>
#include <string>
#include <string_view>

namespace capval {

inline std::uint64_t fnv1a64(std::string_view data, std::uint64_t basis) {
  constexpr std::uint64_t kPrime = 1099511628211ULL;
  std::uint64_t h = basis;
  for (unsigned char c : data) {
    h ^= static_cast<std::uint64_t>(c);
    h *= kPrime;
  }
  return h;
}

inline std::string to_hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<std::size_t>(i)] = digits[v & 0xF];
    v >>= 4;
  }
  return out;
}

// 32 hex characters.
inline std::string content_hash(std::string_view data) {
  constexpr std::uint64_t kBasisA = 14695981039346656037ULL;
  constexpr std::uint64_t kBasisB = 0x9AE16A3B2F90404FULL;
  return to_hex64(fnv1a64(data, kBasisA)) + to_hex64(fnv1a64(data, kBasisB));
}

}  // namespace capval
