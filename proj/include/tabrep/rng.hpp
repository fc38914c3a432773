// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

namespace tabrep {

/// Deterministic pseudo-random generator (xoshiro256++ seeded via splitmix64).
///
/// All distributions are implemented explicitly so that a given (seed, stream,
/// substream) triple produces the same draw sequence on every platform and
/// standard library. Training reproducibility depends on this: never swap in
/// std:: distributions here.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) { seed_state(seed); }

  /// Independent stream derived from (seed, stream, substream). Used to give
  /// every training step / purpose its own generator so that draw order does
  /// not depend on execution history.
  Rng(std::uint64_t seed, std::uint64_t stream, std::uint64_t substream = 0) {
    std::uint64_t x = splitmix(seed + 0x9E3779B97F4A7C15ULL * (stream + 1));
    x = splitmix(x + 0xBF58476D1CE4E5B9ULL * (substream + 1));
    seed_state(x);
  }

  std::uint64_t next_u64() {
    const std::uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
    const std::uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  /// Uniform double in [0, 1) with 53 random bits.
  double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Uniform integer in [0, n). Lemire's multiply-shift with rejection, unbiased.
  std::uint64_t uniform_below(std::uint64_t n) {
    if (n == 0) return 0;
    std::uint64_t x = next_u64();
    unsigned __int128 m = static_cast<unsigned __int128>(x) * n;
    auto lo = static_cast<std::uint64_t>(m);
    if (lo < n) {
      const std::uint64_t threshold = (0 - n) % n;
      while (lo < threshold) {
        x = next_u64();
        m = static_cast<unsigned __int128>(x) * n;
        lo = static_cast<std::uint64_t>(m);
      }
    }
    return static_cast<std::uint64_t>(m >> 64);
  }

  bool bernoulli(double p) { return next_double() < p; }

  /// Standard normal via Box-Muller. Consumes exactly two uniforms per pair.
  double normal() {
    if (have_cached_normal_) {
      have_cached_normal_ = false;
      return cached_normal_;
    }
    double u1 = next_double();
    while (u1 <= 0.0) u1 = next_double();
    const double u2 = next_double();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * M_PI * u2;
    cached_normal_ = r * std::sin(a);
    have_cached_normal_ = true;
    return r * std::cos(a);
  }

  /// Normal with the given stddev, resampled until within clip stddevs.
  double truncated_normal(double stddev, double clip_stddevs = 2.0) {
    double z = normal();
    while (std::fabs(z) > clip_stddevs) z = normal();
    return z * stddev;
  }

  /// Fisher-Yates shuffle.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(uniform_below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  static std::uint64_t splitmix(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
  }

 private:
  static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

  void seed_state(std::uint64_t seed) {
    std::uint64_t x = seed;
    for (auto& word : s_) {
      x = splitmix(x);
      word = x;
    }
    // xoshiro must not start in the all-zero state.
    if (s_[0] == 0 && s_[1] == 0 && s_[2] == 0 && s_[3] == 0) s_[0] = 1;
  }

  std::array<std::uint64_t, 4> s_{};
  double cached_normal_ = 0.0;
  bool have_cached_normal_ = false;
};

/// FNV-1a 64-bit hash, used for content hashes of serialized artifacts.
inline std::uint64_t fnv1a_64(const void* data, std::size_t size,
                              std::uint64_t seed = 0xCBF29CE484222325ULL) {
  const auto* bytes = static_cast<const unsigned char*>(data);
  std::uint64_t h = seed;
  for (std::size_t i = 0; i < size; ++i) {
    h ^= bytes[i];
    h *= 0x100000001B3ULL;
  }
  return h;
}

}  // namespace tabrep
