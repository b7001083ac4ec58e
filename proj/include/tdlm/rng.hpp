#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string_view>

#include "tdlm/tensor.hpp"

namespace tdlm {

// Per-component seed: splitmix64(global ^ fnv1a64(component)). Adding a new
// component never perturbs the random streams of existing ones.
std::uint64_t derive_seed(std::uint64_t global_seed, std::string_view component);

// Deterministic generator. Uniform and normal draws are computed from the raw
// 64-bit engine output, so streams do not depend on the standard library's
// distribution implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }
  // Uniform in [0, 1) with 53 random bits.
  double uniform();
  double normal();
  std::size_t below(std::size_t n);
  // Index drawn with probability proportional to weights (nonnegative, positive sum).
  std::size_t categorical(std::span<const Scalar> weights);

  template <class It>
  void shuffle(It first, It last) {
    const auto n = static_cast<std::size_t>(last - first);
    for (std::size_t i = n; i > 1; --i) std::swap(first[i - 1], first[below(i)]);
  }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0;
};

}  // namespace tdlm
