#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <span>

namespace gazedrop {

namespace detail {

constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

constexpr std::uint64_t kGolden = 0x9e3779b97f4a7c15ULL;

}  // namespace detail

// Counter-based random stream. Output k is a pure function of
// (seed, stream id, k), so streams keyed by different ids never share state
// and any consumer can be replayed by reconstructing the stream.
class RngStream {
 public:
  using result_type = std::uint64_t;

  explicit RngStream(std::uint64_t seed, std::uint64_t stream = 0) noexcept
      : seed_(seed), stream_(stream), key_(make_key(seed, stream)) {}

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t stream_id() const noexcept { return stream_; }
  std::uint64_t counter() const noexcept { return counter_; }

  // Child stream keyed by (this stream's key, id). Does not advance this stream.
  RngStream derive(std::uint64_t id) const noexcept {
    return RngStream(key_, detail::mix64(id + detail::kGolden) ^ stream_);
  }

  template <typename... Ids>
  RngStream derive(std::uint64_t id, Ids... rest) const noexcept {
    return derive(id).derive(static_cast<std::uint64_t>(rest)...);
  }

  std::uint64_t next_u64() noexcept {
    const std::uint64_t x = key_ + (++counter_) * detail::kGolden;
    return detail::mix64(detail::mix64(x) ^ key_);
  }

  result_type operator()() noexcept { return next_u64(); }
  static constexpr result_type min() noexcept { return 0; }
  static constexpr result_type max() noexcept { return std::numeric_limits<result_type>::max(); }

  // Uniform in [0, 1) with 24 bits of resolution.
  float uniform() noexcept { return static_cast<float>(next_u64() >> 40) * 0x1.0p-24f; }

  // Uniform in [0, 1) with 53 bits of resolution.
  double uniform_double() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform_double(); }

  // Box-Muller; one pair of uniforms per variate keeps the call count fixed.
  double normal() noexcept {
    const double u1 = 1.0 - uniform_double();
    const double u2 = uniform_double();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) noexcept {
    if (n == 0) return 0;
    return static_cast<std::uint64_t>((static_cast<unsigned __int128>(next_u64()) * n) >> 64);
  }

  template <typename T>
  void shuffle(std::span<T> items) noexcept {
    for (std::size_t i = items.size(); i > 1; --i) {
      const std::size_t j = below(i);
      std::swap(items[i - 1], items[j]);
    }
  }

 private:
  static std::uint64_t make_key(std::uint64_t seed, std::uint64_t stream) noexcept {
    return detail::mix64(detail::mix64(seed ^ 0x6a09e667f3bcc909ULL) + stream * detail::kGolden);
  }

  std::uint64_t seed_;
  std::uint64_t stream_;
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

}  // namespace gazedrop
