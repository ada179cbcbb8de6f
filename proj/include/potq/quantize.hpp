#pragma once

#include <span>
#include <vector>

#include "potq/dequant.hpp"
#include "potq/tensor.hpp"

namespace potq {

// n-bit signed power-of-two quantization parameters. One bit is the sign;
// exponents take the remaining n-1 bits, so q_max = 2^(n-1) - 1. The scale
// grid is {grid_step * i | i = 1..grid_count}.
struct QuantConfig {
    int bits = 3;
    uint32_t group_size = 128;
    double grid_step = 0.01;
    int grid_count = 200;

    int q_max() const { return (1 << (bits - 1)) - 1; }
    void validate() const;
};

// E = clamp(round(log2(w_abs / s)), 0, q_max), ties rounded away from zero.
// w_abs == 0 clamps to 0. s must be positive.
int compute_exponent(double w_abs, double s, int q_max);

// s * p * 2^e, exact in double.
double reconstruct(double s, int sign, int e);

// Sum of squared reconstruction errors of one group at scale s, summed in
// element order. sign(0) counts as +1, so zeros reconstruct to +s.
double group_loss(std::span<const float> w_group, double s, int q_max);

// Round a searched scale to the FP16 pattern the kernel will consume:
// values below the smallest normal clamp up to it; scales whose exponent
// field breaks the q_max headroom are an error.
uint16_t scale_to_fp16(double s, int q_max);

struct GroupScaleResult {
    double b_star = 0.0;      // winning grid multiplier
    double q1 = 0.0;          // loss re-evaluated with the FP16-rounded scale
    double q1_search = 0.0;   // grid-search objective value at b_star
    uint16_t scale_bits = 0;  // FP16 scale actually stored
};

// Grid search s = s0 * b over the candidate multipliers, s0 = max|w| /
// (2^q_max - 1); ties keep the smallest b. An all-zero group gets the
// smallest-normal scale and b_star = the smallest candidate.
GroupScaleResult search_group_scale(std::span<const float> w_group, const QuantConfig& cfg);

struct Step1Result {
    QuantizedMatrix q;
    std::vector<double> b_star;  // per scale slot, layout.scale_index order
    std::vector<double> q1;     // per scale slot, post-rounding loss
};

// Per-group scale search + code assignment. Groups are independent, so the
// result is identical for any thread count.
Step1Result quantize_step1(const Tensor& w, const QuantConfig& cfg, int threads = 1);

// Ablation arm: skip the search and use b = 1 (scale = s0) everywhere.
Step1Result quantize_naive(const Tensor& w, const QuantConfig& cfg, int threads = 1);

// Uniform asymmetric round-to-nearest baseline, per group:
// S = (max-min)/(2^n-1), Z = round(min/S), code = clamp(round(w/S) - Z, 0,
// 2^n-1); a constant group gets S = 1, Z = round(min), codes 0.
UniformQuantized quantize_rtn_uniform(const Tensor& w, const QuantConfig& cfg);

}  // namespace potq
