#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

namespace heft {

// Deterministic, platform-independent random stream (splitmix64 core with a
// hand-rolled Box-Muller gaussian). std:: distributions are avoided on purpose:
// their output is implementation-defined and would break cross-build
// reproducibility of seeded experiments.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    state_ += 0x9E3779B97F4A7C15ull;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1) with 53 random bits.
  double uniform01() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  // Uniform integer in [0, n). n must be positive.
  std::uint64_t below(std::uint64_t n) {
    // Rejection sampling keeps the draw exactly uniform.
    const std::uint64_t limit = n * (UINT64_MAX / n);
    std::uint64_t v = next_u64();
    while (v >= limit) v = next_u64();
    return v % n;
  }

  double gauss(double mean = 0.0, double std_dev = 1.0) {
    if (has_spare_) {
      has_spare_ = false;
      return mean + spare_ * std_dev;
    }
    constexpr double two_pi = 6.283185307179586476925286766559;
    const double u = 1.0 - uniform01();  // (0, 1], keeps log finite
    const double r = std::sqrt(-2.0 * std::log(u));
    const double t = two_pi * uniform01();
    spare_ = r * std::sin(t);
    has_spare_ = true;
    return mean + r * std::cos(t) * std_dev;
  }

  template <class T>
  void shuffle(std::vector<T>& items) {
    if (items.size() < 2) return;
    for (std::size_t i = items.size() - 1; i > 0; --i) {
      const std::size_t j = static_cast<std::size_t>(below(i + 1));
      std::swap(items[i], items[j]);
    }
  }

  // Stable way to derive independent streams from one experiment seed.
  static std::uint64_t mix(std::uint64_t seed, std::uint64_t stream) {
    Rng r(seed ^ (0x632BE59BD9B4E019ull + stream * 0x9E3779B97F4A7C15ull));
    return r.next_u64();
  }

 private:
  std::uint64_t state_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

inline std::vector<std::size_t> random_permutation(std::size_t n, Rng& rng) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  rng.shuffle(order);
  return order;
}

}  // namespace heft
