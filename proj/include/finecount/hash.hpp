#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>

namespace finecount {

// 64-bit FNV-1a.
constexpr std::uint64_t kFnvOffset = 0xcbf29ce484222325ULL;
constexpr std::uint64_t kFnvPrime = 0x100000001b3ULL;

inline std::uint64_t fnv1a(std::span<const unsigned char> bytes,
                           std::uint64_t h = kFnvOffset) {
  for (unsigned char b : bytes) {
    h ^= b;
    h *= kFnvPrime;
  }
  return h;
}

inline std::uint64_t fnv1a(std::string_view s, std::uint64_t h = kFnvOffset) {
  return fnv1a(std::span(reinterpret_cast<const unsigned char*>(s.data()), s.size()), h);
}

// splitmix64 finalizer; used to derive independent stream seeds.
inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline std::uint64_t mix_seed(std::uint64_t a, std::string_view tag) {
  return mix_seed(a, fnv1a(tag));
}

std::string to_hex(std::uint64_t value);

}  // namespace finecount
