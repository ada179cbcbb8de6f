#include "potq/synth.hpp"

#include <vector>

#include "potq/check.hpp"

namespace potq {

Tensor synth_matrix(uint32_t rows, uint32_t cols, Dist dist, uint64_t seed, double scale,
                    double col_scale_sigma) {
    check(rows >= 1 && cols >= 1, "synthetic matrix needs positive dims");
    Rng rng(seed);
    std::vector<double> col_scale(cols, 1.0);
    if (col_scale_sigma > 0.0)
        for (uint32_t j = 0; j < cols; ++j)
            col_scale[j] = std::exp(col_scale_sigma * rng.normal());

    std::vector<float> data(uint64_t(rows) * cols);
    for (uint32_t i = 0; i < rows; ++i)
        for (uint32_t j = 0; j < cols; ++j) {
            const double v = dist == Dist::Gaussian ? rng.normal() : rng.laplace();
            data[uint64_t(i) * cols + j] = static_cast<float>(scale * col_scale[j] * v);
        }
    return make_tensor({rows, cols}, std::move(data), DType::F32);
}

}  // namespace potq
