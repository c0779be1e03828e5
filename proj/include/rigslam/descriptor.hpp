#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <random>
#include <string>

#include "rigslam/errors.hpp"

namespace rigslam {

/// 256-bit binary feature descriptor compared under Hamming distance.
struct Descriptor256 {
  std::array<std::uint64_t, 4> words{};

  bool operator==(const Descriptor256&) const = default;

  bool bit(int i) const {
    return (words[i >> 6] >> (i & 63)) & 1u;
  }

  void set_bit(int i, bool value) {
    const std::uint64_t mask = std::uint64_t{1} << (i & 63);
    if (value)
      words[i >> 6] |= mask;
    else
      words[i >> 6] &= ~mask;
  }

  template <typename Rng>
  static Descriptor256 random(Rng& rng) {
    Descriptor256 d;
    for (auto& w : d.words) w = rng();
    return d;
  }

  std::string to_hex() const {
    static const char* digits = "0123456789abcdef";
    std::string s;
    s.reserve(64);
    for (const auto w : words)
      for (int shift = 60; shift >= 0; shift -= 4)
        s.push_back(digits[(w >> shift) & 0xf]);
    return s;
  }

  static Descriptor256 from_hex(const std::string& s) {
    if (s.size() != 64)
      throw Error("Descriptor256::from_hex: expected 64 hex digits");
    Descriptor256 d;
    for (int i = 0; i < 4; ++i) {
      std::uint64_t w = 0;
      for (int j = 0; j < 16; ++j) {
        const char c = s[i * 16 + j];
        std::uint64_t nibble;
        if (c >= '0' && c <= '9')
          nibble = c - '0';
        else if (c >= 'a' && c <= 'f')
          nibble = c - 'a' + 10;
        else if (c >= 'A' && c <= 'F')
          nibble = c - 'A' + 10;
        else
          throw Error("Descriptor256::from_hex: invalid digit");
        w = (w << 4) | nibble;
      }
      d.words[i] = w;
    }
    return d;
  }
};

inline int hamming_distance(const Descriptor256& a, const Descriptor256& b) {
  int d = 0;
  for (int i = 0; i < 4; ++i)
    d += std::popcount(a.words[i] ^ b.words[i]);
  return d;
}

}  // namespace rigslam
