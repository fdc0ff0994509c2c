#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <stdexcept>

namespace trapo {

namespace detail {

constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

/// Philox4x32-10 block function (Salmon et al., SC'11).
constexpr std::array<std::uint32_t, 4> philox4x32(std::array<std::uint32_t, 4> ctr,
                                                  std::array<std::uint32_t, 2> key) noexcept {
  constexpr std::uint32_t M0 = 0xD2511F53u, M1 = 0xCD9E8D57u;
  constexpr std::uint32_t W0 = 0x9E3779B9u, W1 = 0xBB67AE85u;
  for (int round = 0; round < 10; ++round) {
    const std::uint64_t p0 = std::uint64_t{M0} * ctr[0];
    const std::uint64_t p1 = std::uint64_t{M1} * ctr[2];
    const auto hi0 = static_cast<std::uint32_t>(p0 >> 32), lo0 = static_cast<std::uint32_t>(p0);
    const auto hi1 = static_cast<std::uint32_t>(p1 >> 32), lo1 = static_cast<std::uint32_t>(p1);
    ctr = {hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0};
    key[0] += W0;
    key[1] += W1;
  }
  return ctr;
}

}  // namespace detail

/// Stream domains keep world generation, policy init and Monte Carlo checks
/// from sharing counters with training rollouts.
enum class StreamDomain : std::uint32_t { rollout = 0, world = 1, init = 2, verify = 3, eval = 4 };

/// Counter-based random stream. The key is derived from (seed, domain); the
/// counter is (block index, question id, epoch). Two streams with distinct
/// keys or distinct (question id, epoch) never share a counter block, so the
/// draws for one question do not depend on how many other questions were
/// sampled before it.
class RandomStream {
 public:
  RandomStream(std::uint64_t seed, std::uint32_t question_id, std::uint32_t epoch,
               StreamDomain domain = StreamDomain::rollout) noexcept
      : question_id_(question_id), epoch_(epoch) {
    const std::uint64_t k =
        detail::splitmix64(seed ^ detail::splitmix64(static_cast<std::uint64_t>(domain) + 1));
    key_ = {static_cast<std::uint32_t>(k), static_cast<std::uint32_t>(k >> 32)};
  }

  std::uint32_t next_u32() noexcept {
    if (lane_ == 4) refill();
    return buffer_[lane_++];
  }

  std::uint64_t next_u64() noexcept {
    const std::uint64_t hi = next_u32();
    return (hi << 32) | next_u32();
  }

  /// Uniform on [0, 1) with 53 random bits.
  double uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Standard normal via Box-Muller; both variates of a pair are used.
  double normal() noexcept {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  /// Uniform integer in [0, n).
  std::uint32_t below(std::uint32_t n) {
    if (n == 0) throw std::invalid_argument("below: empty range");
    const std::uint32_t limit = static_cast<std::uint32_t>(-n) % n;  // 2^32 mod n
    for (;;) {
      const std::uint64_t m = std::uint64_t{next_u32()} * n;
      if (static_cast<std::uint32_t>(m) >= limit) return static_cast<std::uint32_t>(m >> 32);
    }
  }

  /// Inverse-CDF draw from a probability vector.
  int categorical(std::span<const double> probs) noexcept {
    const double u = uniform();
    double acc = 0.0;
    for (std::size_t k = 0; k < probs.size(); ++k) {
      acc += probs[k];
      if (u < acc) return static_cast<int>(k);
    }
    // Round-off left u above the final partial sum: take the last non-zero entry.
    for (std::size_t k = probs.size(); k-- > 0;)
      if (probs[k] > 0.0) return static_cast<int>(k);
    return 0;
  }

 private:
  void refill() noexcept {
    buffer_ = detail::philox4x32({static_cast<std::uint32_t>(block_),
                                  static_cast<std::uint32_t>(block_ >> 32), question_id_, epoch_},
                                 key_);
    ++block_;
    lane_ = 0;
  }

  std::array<std::uint32_t, 2> key_{};
  std::uint32_t question_id_;
  std::uint32_t epoch_;
  std::uint64_t block_ = 0;
  std::array<std::uint32_t, 4> buffer_{};
  std::size_t lane_ = 4;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

inline RandomStream rng_stream(std::uint64_t seed, std::uint32_t question_id, std::uint32_t epoch) {
  return RandomStream(seed, question_id, epoch, StreamDomain::rollout);
}

}  // namespace trapo
