#pragma once

#include <cstdint>
#include <cstring>
#include <span>
#include <string_view>

namespace d2dmoe {

// 64-bit FNV-1a, used for dataset hashes, slice provenance and split keys.
class Fnv1a {
 public:
  static constexpr std::uint64_t kOffset = 0xcbf29ce484222325ULL;
  static constexpr std::uint64_t kPrime = 0x100000001b3ULL;

  Fnv1a& bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h_ ^= b[i];
      h_ *= kPrime;
    }
    return *this;
  }
  template <class T>
  Fnv1a& value(const T& v) {
    return bytes(&v, sizeof(T));
  }
  template <class T>
  Fnv1a& span(std::span<const T> s) {
    return bytes(s.data(), s.size_bytes());
  }
  Fnv1a& str(std::string_view s) { return bytes(s.data(), s.size()); }

  std::uint64_t digest() const { return h_; }

 private:
  std::uint64_t h_ = kOffset;
};

inline std::uint64_t mix64(std::uint64_t x) {
  x ^= x >> 33;
  x *= 0xff51afd7ed558ccdULL;
  x ^= x >> 33;
  x *= 0xc4ceb9fe1a85ec53ULL;
  x ^= x >> 33;
  return x;
}

// Derives an independent stream seed from a base seed and a label.
inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view label) {
  return mix64(Fnv1a().value(seed).str(label).digest());
}

}  // namespace d2dmoe
