#pragma once

#include <cmath>
#include <cstdint>

namespace fixq::rng {

// splitmix64 finalizer. All randomness in the library flows through this
// mixer so draws can be keyed by (seed, index) and never depend on
// evaluation order or thread scheduling.
constexpr std::uint64_t mix(std::uint64_t z) noexcept {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// Independent stream seed for a (seed, salt) pair, e.g. per layer or per
// optimizer step.
constexpr std::uint64_t derive(std::uint64_t seed, std::uint64_t salt) noexcept {
  return mix(seed ^ mix(salt + 0x632be59bd9b4e019ULL));
}

inline std::uint64_t draw_u64(std::uint64_t seed, std::uint64_t index) noexcept {
  return mix(seed + 0xd1b54a32d192ed03ULL * (index + 1));
}

// Uniform in [0, 1) keyed by (seed, index); 53 significant bits.
inline double uniform_at(std::uint64_t seed, std::uint64_t index) noexcept {
  return static_cast<double>(draw_u64(seed, index) >> 11) * 0x1.0p-53;
}

// Stateful counter view over the keyed generator.
class Counter {
 public:
  explicit Counter(std::uint64_t seed) noexcept : seed_(seed) {}

  std::uint64_t next_u64() noexcept { return draw_u64(seed_, n_++); }

  double uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Index draw in [0, bound) via 128-bit multiply-shift.
  std::uint64_t below(std::uint64_t bound) noexcept {
    return static_cast<std::uint64_t>(
        (static_cast<unsigned __int128>(next_u64()) * bound) >> 64);
  }

  // Standard normal via Box-Muller. std::normal_distribution is
  // implementation-defined, which would break cross-platform determinism.
  double gaussian() noexcept {
    double u1 = uniform();
    const double u2 = uniform();
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
  }

 private:
  std::uint64_t seed_;
  std::uint64_t n_ = 0;
};

}  // namespace fixq::rng
