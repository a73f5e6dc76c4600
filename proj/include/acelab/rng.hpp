#pragma once

// Platform-independent random streams. std:: distributions are not
// reproducible across standard libraries, so every draw goes through PCG32
// (XSH-RR 64/32) and hand-written transforms.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "acelab/errors.hpp"

namespace acelab {

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace detail

class Rng {
 public:
  static constexpr std::string_view kAlgorithm = "pcg32-xsh-rr";

  explicit Rng(std::uint64_t seed = 0, std::string label = "root")
      : seed_(seed), label_(std::move(label)) {
    const std::uint64_t stream = detail::splitmix64(detail::fnv1a(label_));
    inc_ = (stream << 1u) | 1u;
    state_ = 0;
    next_u32();
    state_ += detail::splitmix64(seed);
    next_u32();
  }

  /// Independent stream keyed by (seed, label path).
  Rng child(std::string_view label) const {
    const std::uint64_t s = detail::splitmix64(seed_ ^ detail::fnv1a(label));
    return Rng(s, label_ + "/" + std::string(label));
  }

  std::uint64_t seed() const { return seed_; }
  const std::string& label() const { return label_; }

  std::uint32_t next_u32() {
    const std::uint64_t old = state_;
    state_ = old * 6364136223846793005ULL + inc_;
    const auto xorshifted = static_cast<std::uint32_t>(((old >> 18u) ^ old) >> 27u);
    const auto rot = static_cast<std::uint32_t>(old >> 59u);
    return (xorshifted >> rot) | (xorshifted << ((32u - rot) & 31u));
  }

  /// Uniform on [0, 1) with 53 random bits.
  double uniform() {
    const std::uint64_t a = next_u32() >> 5;  // 27 bits
    const std::uint64_t b = next_u32() >> 6;  // 26 bits
    return (static_cast<double>(a) * 67108864.0 + static_cast<double>(b)) *
           (1.0 / 9007199254740992.0);
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Unbiased integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) throw ContractError("Rng::below(0)");
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x;
    do {
      x = (static_cast<std::uint64_t>(next_u32()) << 32) | next_u32();
    } while (x >= limit);
    return x % n;
  }

  /// Standard normal via Box-Muller; the second variate of each pair is cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = 0.0;
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double t = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(t);
    has_spare_ = true;
    return r * std::cos(t);
  }

  bool bernoulli(double p) { return uniform() < p; }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const std::size_t j = below(i);
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::uint64_t seed_;
  std::string label_;
  std::uint64_t state_ = 0;
  std::uint64_t inc_ = 1;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

/// n i.i.d. standard normal draws.
inline std::vector<double> gaussian(Rng& rng, std::size_t n) {
  if (n == 0) throw ContractError("gaussian: n must be >= 1");
  std::vector<double> out(n);
  for (auto& x : out) x = rng.normal();
  return out;
}

/// A random permutation of 0..n-1.
inline std::vector<std::size_t> permutation(Rng& rng, std::size_t n) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  rng.shuffle(idx);
  return idx;
}

}  // namespace acelab
