#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>

namespace prunevc {

// Counter-based seeding: every consumer derives a fresh generator from
// (seed, stream, counter), so reproducing a run needs no RNG state in
// checkpoints — the (seed, step) pair identifies every draw.
namespace rngstream {
inline constexpr std::uint64_t init = 0x01;
inline constexpr std::uint64_t quantizer = 0x02;
inline constexpr std::uint64_t batcher = 0x03;
inline constexpr std::uint64_t synth = 0x04;
inline constexpr std::uint64_t test = 0x7f;
}  // namespace rngstream

inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline std::uint64_t rng_key(std::uint64_t seed, std::uint64_t stream,
                             std::uint64_t counter) {
  return mix64(mix64(seed ^ 0x9cb4d013a8f2c9e1ull) ^ mix64(stream) ^
               mix64(counter * 0x100000001b3ull));
}

// FNV-1a: stable name hash for per-parameter init streams
inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

// mt19937_64 with bit-level float extraction; the std distributions are
// implementation-defined, so floats are mapped from raw bits here.
class RngStream {
 public:
  RngStream(std::uint64_t seed, std::uint64_t stream, std::uint64_t counter)
      : gen_(rng_key(seed, stream, counter)) {}

  std::uint64_t next_u64() { return gen_(); }

  // uniform in [0,1) with 24-bit resolution, exact in float
  float uniform() {
    return static_cast<float>(gen_() >> 40) * (1.0f / 16777216.0f);
  }

  float uniform(float lo, float hi) { return lo + (hi - lo) * uniform(); }

  double uniform_d() {
    return static_cast<double>(gen_() >> 11) * (1.0 / 9007199254740992.0);
  }

  // Box-Muller; consumes two draws per pair, second value cached
  float normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    float u1 = uniform();
    float u2 = uniform();
    if (u1 < 1e-12f) u1 = 1e-12f;
    const float r = std::sqrt(-2.0f * std::log(u1));
    const float a = 6.28318530717958647692f * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  std::uint64_t below(std::uint64_t n) { return n ? gen_() % n : 0; }

 private:
  std::mt19937_64 gen_;
  float spare_ = 0.0f;
  bool have_spare_ = false;
};

}  // namespace prunevc
