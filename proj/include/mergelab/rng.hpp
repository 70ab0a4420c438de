// Deterministic, serializable random streams (xoshiro256** with splitmix64
// seeding). Every source of randomness in the lab flows through a named
// stream whose 4x u64 state can be checkpointed and replayed.
#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string_view>

namespace mergelab {

inline std::uint64_t splitmix64(std::uint64_t& x) {
  x += 0x9e3779b97f4a7c15ULL;
  std::uint64_t z = x;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline std::uint64_t fnv1a64(std::string_view data, std::uint64_t seed = 0xcbf29ce484222325ULL) {
  std::uint64_t h = seed;
  for (unsigned char c : data) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// Mixes a global seed with a stream tag so different roles (data order,
// augmentation, init, ...) get decorrelated streams from one user seed.
inline std::uint64_t stream_seed(std::uint64_t global_seed, std::string_view tag) {
  std::uint64_t x = global_seed ^ fnv1a64(tag);
  return splitmix64(x);
}

class Rng {
 public:
  using State = std::array<std::uint64_t, 4>;

  Rng() : Rng(0) {}
  explicit Rng(std::uint64_t seed) {
    std::uint64_t x = seed;
    for (auto& word : state_) word = splitmix64(x);
  }

  static Rng from_state(const State& s) {
    Rng r;
    r.state_ = s;
    return r;
  }
  const State& state() const { return state_; }
  void set_state(const State& s) { state_ = s; }

  std::uint64_t next() {
    auto rotl = [](std::uint64_t v, int k) { return (v << k) | (v >> (64 - k)); };
    const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  // Uniform in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Unbiased integer in [0, n) by rejection.
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) throw std::invalid_argument("Rng::below: n must be positive");
    const std::uint64_t bound = ~std::uint64_t{0} - ~std::uint64_t{0} % n;
    std::uint64_t v = next();
    while (v >= bound) v = next();
    return v % n;
  }

  // Standard normal via Box-Muller. Consumes two uniforms per draw so the
  // stream state stays a pure function of the number of calls.
  double normal() {
    const double u1 = 1.0 - uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
  }

 private:
  State state_{};
};

}  // namespace mergelab
