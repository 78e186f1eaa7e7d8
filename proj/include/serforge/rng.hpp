#pragma once

#include <cstdint>
#include <random>
#include <vector>

namespace serforge {

// Deterministic generator. mt19937_64 has a pinned algorithm, and all
// derived draws below are built from raw 64-bit outputs (no use of the
// standard distributions, whose streams vary across library vendors), so
// identical seeds reproduce identical weight draws, dropout masks and
// shuffles on the same build.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  std::uint64_t next_u64() { return gen_(); }

  // [0, 1) with 53-bit resolution
  double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // [0, n), n > 0; modulo bias is negligible for the index ranges used here
  std::size_t index(std::size_t n) {
    return static_cast<std::size_t>(gen_() % static_cast<std::uint64_t>(n));
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[index(i)]);
    }
  }

 private:
  std::mt19937_64 gen_;
};

}  // namespace serforge
