#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace detflow {

// Counter-based random streams.  Every (seed, tag, index, ...) tuple names an
// independent stream, so sample i of a run can be generated by whichever
// worker picks it up and the result never depends on the worker count.
class RngStream {
 public:
  explicit RngStream(std::uint64_t state) : state_(state) {}

  /// Stream addressed by up to three indices under a master seed.
  static RngStream derive(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0,
                          std::uint64_t c = 0) {
    std::uint64_t s = mix(seed ^ 0x9E3779B97F4A7C15ULL);
    s = mix(s ^ a);
    s = mix(s ^ b);
    s = mix(s ^ c);
    return RngStream(s);
  }

  std::uint64_t next_u64() {
    state_ += 0x9E3779B97F4A7C15ULL;  // splitmix64
    return mix(state_);
  }

  /// Uniform double in [0, 1).
  double next_unit() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Standard normal via Box-Muller; the second value of each pair is cached.
  double next_normal() {
    if (has_cached_) {
      has_cached_ = false;
      return cached_;
    }
    const double u1 = 1.0 - next_unit();  // (0, 1], keeps log finite
    const double u2 = next_unit();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * std::numbers::pi * u2;
    cached_ = r * std::sin(a);
    has_cached_ = true;
    return r * std::cos(a);
  }

 private:
  static std::uint64_t mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  std::uint64_t state_;
  double cached_ = 0.0;
  bool has_cached_ = false;
};

// Stream tags; keeps independent uses of the same master seed apart.
namespace rng_tag {
inline constexpr std::uint64_t kEstimate = 0x45535449;   // estimator sample draws
inline constexpr std::uint64_t kTrainBatch = 0x54524149; // training batch draws
inline constexpr std::uint64_t kTrainEval = 0x5456414C;  // held-out eval draws
inline constexpr std::uint64_t kInit = 0x494E4954;       // parameter initialization
}  // namespace rng_tag

}  // namespace detflow
