#pragma once

#include <cmath>
#include <cstdint>

namespace dan {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Counter-based generator: the stream is a pure function of (seed, stream_id),
// so results are independent of evaluation order and worker scheduling.
class KeyedRng {
 public:
  KeyedRng(std::uint64_t seed, std::uint64_t stream_id = 0)
      : state_(splitmix64(splitmix64(seed) ^ (stream_id * 0xd1342543de82ef95ULL + 1))) {}

  std::uint64_t next_u64() {
    state_ = splitmix64(state_ + 0x2545f4914f6cdd1dULL);
    return state_;
  }

  // uniform in [0,1)
  double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // uniform in [lo,hi)
  double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

  // uniform integer in [0,n)
  std::uint64_t next_below(std::uint64_t n) { return n ? next_u64() % n : 0; }

  // standard normal via Box-Muller
  double next_gaussian() {
    double u1 = next_double();
    double u2 = next_double();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

 private:
  std::uint64_t state_;
};

}  // namespace dan
