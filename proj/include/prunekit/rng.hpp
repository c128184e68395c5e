#pragma once

#include <cstdint>

#include "prunekit/tensor.hpp"

namespace prunekit {

// Deterministic generator: xoshiro256** seeded via splitmix64. The algorithm
// is fixed so an identical seed yields an identical stream everywhere; masks
// and models derived from a seed are reproducible.
class Rng {
  public:
    explicit Rng(uint64_t seed);

    uint64_t next_u64();

    // Uniform in [0, 1), 53-bit resolution.
    double next_unit();

    // Uniform in [0, n). Plain modulo reduction; the bias is irrelevant at
    // the corpus sizes involved and keeps the draw count per call fixed.
    uint64_t below(uint64_t n);

    // Standard normal scaled by stddev, Box-Muller with the second value of
    // each pair cached. stddev == 0 yields exact zeros.
    float next_normal(float stddev);

    Tensor2 normal(int rows, int cols, float stddev);

  private:
    uint64_t s_[4];
    bool has_spare_ = false;
    double spare_ = 0.0;
};

} // namespace prunekit
