#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace steerkit {

// splitmix64 finalizer, used to mix seeds and derive child streams.
inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t tag) {
  return mix64(base ^ mix64(tag));
}

inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a,
                                 std::uint64_t b) {
  return derive_seed(derive_seed(base, a), b);
}

inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a,
                                 std::uint64_t b, std::uint64_t c) {
  return derive_seed(derive_seed(base, a, b), c);
}

// Deterministic RNG. All sampling goes through hand-rolled transforms
// (not std::*_distribution, whose output is implementation-defined),
// so a seed produces the same stream on every platform.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  std::uint64_t next_u64() { return gen_(); }

  // Uniform in [0, 1) with 53 bits of precision.
  double uniform01() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  // Uniform index in [0, n). Modulo bias is negligible for n << 2^64.
  std::size_t index(std::size_t n) {
    return static_cast<std::size_t>(next_u64() % n);
  }

  // Standard normal via Box-Muller; the pair's second value is cached.
  double gaussian() {
    if (has_cached_) {
      has_cached_ = false;
      return cached_;
    }
    double u1 = uniform01();
    while (u1 <= 0.0) u1 = uniform01();
    const double u2 = uniform01();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 6.283185307179586476925286766559 * u2;
    cached_ = r * std::sin(a);
    has_cached_ = true;
    return r * std::cos(a);
  }

  // Fisher-Yates; deterministic given the stream state.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[index(i)]);
    }
  }

  Rng fork(std::uint64_t stream) const {
    return Rng(derive_seed(base_snapshot(), stream));
  }

 private:
  std::uint64_t base_snapshot() const {
    // mt19937_64 state is not observable; fork from a fresh draw of a copy.
    std::mt19937_64 copy = gen_;
    return copy();
  }

  std::mt19937_64 gen_;
  double cached_ = 0.0;
  bool has_cached_ = false;
};

}  // namespace steerkit
