#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace shape {

// Counter-based SplitMix64 stream (Steele, Lea & Flood 2014).
//
//   state_{n+1} = state_n + 0x9E3779B97F4A7C15
//   z = state_{n+1}
//   z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
//   z = (z ^ (z >> 27)) * 0x94D049BB133111EB
//   out = z ^ (z >> 31)
//
// uniform()  = (next() >> 11) * 2^-53, in [0, 1)
// normal()   = Box-Muller on two uniforms, cosine branch only (no caching)
// below(n)   = Lemire's multiply-shift with rejection
// derive(i)  = new stream seeded with mix(seed ^ mix(i + 1))
//
// These definitions are part of the file contract: any reimplementation that
// follows them regenerates the same synthetic datasets bit-for-bit.
class SeededRng {
 public:
  explicit SeededRng(std::uint64_t seed = 0) : seed_(seed), state_(seed) {}

  // Resumes a stream from a saved (seed, state, counter) triple.
  static SeededRng restore(std::uint64_t seed, std::uint64_t state, std::uint64_t counter) {
    SeededRng r(seed);
    r.state_ = state;
    r.counter_ = counter;
    return r;
  }

  static constexpr std::uint64_t mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  std::uint64_t next() {
    state_ += 0x9E3779B97F4A7C15ULL;
    ++counter_;
    return mix(state_);
  }

  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  double normal() {
    // 1 - u keeps the log argument in (0, 1].
    const double u1 = 1.0 - uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  // Uniform integer in [0, n). n must be > 0.
  std::uint64_t below(std::uint64_t n) {
    unsigned __int128 m = static_cast<unsigned __int128>(next()) * n;
    auto low = static_cast<std::uint64_t>(m);
    if (low < n) {
      const std::uint64_t threshold = (0 - n) % n;
      while (low < threshold) {
        m = static_cast<unsigned __int128>(next()) * n;
        low = static_cast<std::uint64_t>(m);
      }
    }
    return static_cast<std::uint64_t>(m >> 64);
  }

  SeededRng derive(std::uint64_t index) const { return SeededRng(mix(seed_ ^ mix(index + 1))); }

  std::uint64_t seed() const { return seed_; }
  std::uint64_t counter() const { return counter_; }
  std::uint64_t state() const { return state_; }

  // UniformRandomBitGenerator. Standard distributions are implementation-defined;
  // use the members above when results must be portable.
  using result_type = std::uint64_t;
  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return ~result_type(0); }
  result_type operator()() { return next(); }

 private:
  std::uint64_t seed_;
  std::uint64_t state_;
  std::uint64_t counter_ = 0;
};

}  // namespace shape
