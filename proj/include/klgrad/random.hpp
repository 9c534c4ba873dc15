#pragma once

// Seeded random streams. Every stream used anywhere in the library is derived
// from a single 64-bit master seed plus a (label, index) pair, so results do
// not depend on the order in which parallel work is scheduled.

#include <cstdint>
#include <random>
#include <string_view>

namespace klgrad {

inline constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// 64-bit FNV-1a.
inline constexpr std::uint64_t fnv1a64(std::string_view bytes) noexcept {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline constexpr std::uint64_t derive_seed(std::uint64_t master, std::string_view label,
                                           std::uint64_t index = 0) noexcept {
  std::uint64_t s = splitmix64(master);
  s = splitmix64(s ^ fnv1a64(label));
  return splitmix64(s ^ splitmix64(index));
}

/// Random stream with a portable uniform draw (std:: distributions are
/// implementation-defined, the raw engine output is not).
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  Rng(std::uint64_t master, std::string_view label, std::uint64_t index = 0)
      : engine_(derive_seed(master, label, index)) {}

  /// Uniform on [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  bool bernoulli(double p) { return uniform() < p; }

  std::uint64_t next_u64() { return engine_(); }

 private:
  std::mt19937_64 engine_;
};

}  // namespace klgrad
