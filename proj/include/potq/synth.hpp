#pragma once

#include <cmath>
#include <cstdint>

#include "potq/tensor.hpp"

namespace potq {

// splitmix64-based generator; deterministic across platforms, which keeps
// seeded reports and tests reproducible.
struct Rng {
    uint64_t state;

    explicit Rng(uint64_t seed) : state(seed) {}

    uint64_t next() {
        state += 0x9E3779B97F4A7C15ull;
        uint64_t z = state;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
        return z ^ (z >> 31);
    }

    double uniform() { return double(next() >> 11) * 0x1.0p-53; }  // [0, 1)

    double normal() {  // Box-Muller
        const double u1 = 1.0 - uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

    double laplace() {  // unit scale, inverse CDF
        const double u = uniform() - 0.5;
        const double t = 1.0 - 2.0 * std::fabs(u);
        return (u < 0 ? -1.0 : 1.0) * -std::log(t > 0 ? t : 0x1.0p-53);
    }
};

enum class Dist { Gaussian, Laplace };

// Random rows x cols matrix. col_scale_sigma > 0 multiplies each column by
// a log-normal scale, giving the anisotropy typical of activations.
Tensor synth_matrix(uint32_t rows, uint32_t cols, Dist dist, uint64_t seed,
                    double scale = 1.0, double col_scale_sigma = 0.0);

}  // namespace potq
