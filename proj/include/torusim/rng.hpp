#pragma once

#include <cstdint>

namespace torusim {

/// SplitMix64 finalizer. Cheap bijective 64-bit mixer.
constexpr std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Philox2x64-10 block: a keyed bijection of a 128-bit counter.
///
/// Every draw in the simulator is a pure function of (master seed, stream key,
/// counter), so results never depend on the order in which streams are used.
class CounterRng {
 public:
  explicit CounterRng(std::uint64_t seed = 0) : seed_(seed) {}

  std::uint64_t seed() const { return seed_; }

  /// Value number `counter` of stream `key`.
  std::uint64_t at(std::uint64_t key, std::uint64_t counter) const {
    std::uint64_t c0 = counter;
    std::uint64_t c1 = key;
    std::uint64_t k = seed_;
    for (int round = 0; round < 10; ++round) {
      const unsigned __int128 prod = static_cast<unsigned __int128>(kMul) * c0;
      const auto hi = static_cast<std::uint64_t>(prod >> 64);
      const auto lo = static_cast<std::uint64_t>(prod);
      c0 = hi ^ k ^ c1;
      c1 = lo;
      k += kWeyl;
    }
    return c0;
  }

 private:
  static constexpr std::uint64_t kMul = 0xD2B74407B1D9B3C7ULL;
  static constexpr std::uint64_t kWeyl = 0x9E3779B97F4A7C15ULL;
  std::uint64_t seed_;
};

/// Uniform double in [0, 1) from the top 53 bits.
constexpr double to_unit(std::uint64_t u) {
  return static_cast<double>(u >> 11) * (1.0 / 9007199254740992.0);
}

/// A named stream: (key, counter) against a CounterRng.
struct RngStream {
  std::uint64_t key = 0;
  std::uint64_t counter = 0;

  std::uint64_t draw(const CounterRng& rng) { return rng.at(key, counter++); }
  double uniform(const CounterRng& rng) { return to_unit(draw(rng)); }
  /// Uniform integer in [0, n). Multiply-shift; bias is below 2^-64 * n.
  std::uint64_t below(const CounterRng& rng, std::uint64_t n) {
    const unsigned __int128 prod = static_cast<unsigned __int128>(draw(rng)) * n;
    return static_cast<std::uint64_t>(prod >> 64);
  }
};

}  // namespace torusim
