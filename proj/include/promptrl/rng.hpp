// SPDX-License-Identifier: Apache-2.0
//
// Counter-based random streams (Philox4x32-10, Salmon et al. SC'11).
//
// A stream is identified by (seed, a, b, c). Two streams with different ids
// are statistically independent and the values drawn from one stream never
// depend on how many other streams were used, which makes parallel rollouts
// reproduce the sequential results bit for bit.
#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>

namespace promptrl {

class Philox4x32 {
 public:
  using Block = std::array<std::uint32_t, 4>;
  using Key = std::array<std::uint32_t, 2>;

  static Block generate(Block counter, Key key) {
    for (int round = 0; round < 10; ++round) {
      counter = single_round(counter, key);
      key[0] += kWeylA;
      key[1] += kWeylB;
    }
    return counter;
  }

 private:
  static constexpr std::uint32_t kMulA = 0xD2511F53u;
  static constexpr std::uint32_t kMulB = 0xCD9E8D57u;
  static constexpr std::uint32_t kWeylA = 0x9E3779B9u;
  static constexpr std::uint32_t kWeylB = 0xBB67AE85u;

  static Block single_round(const Block& ctr, const Key& key) {
    const std::uint64_t p0 = static_cast<std::uint64_t>(kMulA) * ctr[0];
    const std::uint64_t p1 = static_cast<std::uint64_t>(kMulB) * ctr[2];
    const auto hi0 = static_cast<std::uint32_t>(p0 >> 32);
    const auto lo0 = static_cast<std::uint32_t>(p0);
    const auto hi1 = static_cast<std::uint32_t>(p1 >> 32);
    const auto lo1 = static_cast<std::uint32_t>(p1);
    return {hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0};
  }
};

/// splitmix64 finalizer; used to fold stream coordinates into a 64-bit id.
constexpr std::uint64_t mix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

class RngStream {
 public:
  RngStream() : RngStream(0) {}

  explicit RngStream(std::uint64_t seed, std::uint64_t a = 0, std::uint64_t b = 0, std::uint64_t c = 0)
      : seed_(seed), id_(mix64(mix64(mix64(a) ^ b) ^ (c * 0x2545F4914F6CDD1Dull))) {}

  /// Child stream; the parent is not advanced.
  RngStream substream(std::uint64_t tag) const {
    RngStream child = *this;
    child.id_ = mix64(id_ ^ mix64(tag + 0x632BE59BD9B4E019ull));
    child.block_ = 0;
    child.buffered_ = 0;
    child.has_spare_normal_ = false;
    return child;
  }

  std::uint64_t seed() const { return seed_; }
  std::uint64_t id() const { return id_; }

  std::uint64_t next_u64() {
    if (buffered_ == 0) {
      refill();
    }
    const std::uint64_t out = (static_cast<std::uint64_t>(buf_[4 - buffered_]) << 32) | buf_[5 - buffered_];
    buffered_ -= 2;
    return out;
  }

  /// Uniform on the open interval (0, 1).
  double uniform() { return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53; }

  /// Uniform integer in [0, n).
  std::uint64_t uniform_int(std::uint64_t n) {
    // Lemire-style rejection keeps the result unbiased.
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    std::uint64_t x = next_u64();
    while (x >= limit) {
      x = next_u64();
    }
    return x % n;
  }

  /// Standard normal via Box-Muller.
  double normal() {
    if (has_spare_normal_) {
      has_spare_normal_ = false;
      return spare_normal_;
    }
    const double u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * std::numbers::pi * u2;
    spare_normal_ = r * std::sin(theta);
    has_spare_normal_ = true;
    return r * std::cos(theta);
  }

  bool bernoulli(double p) { return uniform() < p; }

  /// Index drawn from an unnormalized non-negative weight vector.
  template <typename Real>
  std::size_t categorical(std::span<const Real> weights) {
    double total = 0.0;
    for (Real w : weights) {
      total += static_cast<double>(w);
    }
    const double target = uniform() * total;
    double acc = 0.0;
    for (std::size_t i = 0; i < weights.size(); ++i) {
      acc += static_cast<double>(weights[i]);
      if (target < acc) {
        return i;
      }
    }
    // Rounding can leave target == total; return the last positive entry.
    for (std::size_t i = weights.size(); i-- > 0;) {
      if (weights[i] > Real(0)) {
        return i;
      }
    }
    return weights.size() - 1;
  }

 private:
  void refill() {
    const Philox4x32::Block ctr{static_cast<std::uint32_t>(block_), static_cast<std::uint32_t>(block_ >> 32),
                                static_cast<std::uint32_t>(id_), static_cast<std::uint32_t>(id_ >> 32)};
    const Philox4x32::Key key{static_cast<std::uint32_t>(seed_), static_cast<std::uint32_t>(seed_ >> 32)};
    buf_ = Philox4x32::generate(ctr, key);
    ++block_;
    buffered_ = 4;
  }

  std::uint64_t seed_ = 0;
  std::uint64_t id_ = 0;
  std::uint64_t block_ = 0;
  Philox4x32::Block buf_{};
  int buffered_ = 0;
  bool has_spare_normal_ = false;
  double spare_normal_ = 0.0;
};

}  // namespace promptrl
