#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace otkd {

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace detail

/// Counter-based random stream. The sequence of draws is a pure function of
/// (seed, label, index), so streams are independent: adding a new label or
/// drawing from one stream never shifts another, and generation keyed by
/// sample index is order-independent and safe to parallelize.
class StreamRng {
 public:
  StreamRng(std::uint64_t seed, std::string_view label, std::uint64_t index = 0) {
    std::uint64_t h = detail::splitmix64(seed ^ detail::fnv1a64(label));
    state_ = detail::splitmix64(h ^ (index * 0x9e3779b97f4a7c15ULL));
  }

  std::uint64_t next_u64() {
    state_ = detail::splitmix64(state_);
    return state_;
  }

  /// Uniform double in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Uniform integer in [lo, hi], inclusive.
  int uniform_int(int lo, int hi) {
    std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
    return lo + static_cast<int>(next_u64() % span);
  }

  /// Standard normal via Box-Muller; second value of each pair is cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    // (0, 1] so the log is always finite
    double u1 = static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

 private:
  std::uint64_t state_ = 0;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace otkd
