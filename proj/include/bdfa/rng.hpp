#pragma once

#include <cstdint>
#include <random>

namespace bdfa {

// Independent named streams derived from one experiment seed.
enum class RngStream : std::uint32_t {
  init = 1,
  dataset = 2,
  shuffle = 3,
  distill = 4,
  attack = 5,
  test_split = 6,
  attack_batch = 7,
};

inline std::mt19937_64 make_rng(std::uint64_t seed, RngStream stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream)};
  return std::mt19937_64(seq);
}

}  // namespace bdfa
