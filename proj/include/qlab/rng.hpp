#pragma once

#include <array>
#include <cstdint>
#include <initializer_list>
#include <vector>

namespace qlab {

/// SplitMix64 finalizer; also used to derive independent stream seeds.
std::uint64_t splitmix64(std::uint64_t& state);

/// Child seed from a parent seed and a list of tags (window index, purpose...).
std::uint64_t derive_seed(std::uint64_t seed, std::initializer_list<std::uint64_t> tags);

/// xoshiro256** seeded through SplitMix64. All derived draws (uniform reals,
/// bounded integers, normals) are defined here rather than through <random>
/// distributions so that sequences are identical across standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  std::uint64_t next();
  /// Uniform in [0, 1) with 53 random bits.
  double uniform();
  /// Uniform integer in [0, bound); bound must be positive. Unbiased (Lemire).
  std::uint64_t below(std::uint64_t bound);
  /// Standard normal via Box-Muller (both outputs used).
  double normal();
  /// In-place Fisher-Yates shuffle.
  template <typename V>
  void shuffle(std::vector<V>& items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(items[i - 1], items[j]);
    }
  }

 private:
  std::array<std::uint64_t, 4> s_{};
  double spare_ = 0;
  bool has_spare_ = false;
};

}  // namespace qlab
