#pragma once

#include <span>
#include <string>
#include <vector>

#include "potq/dequant.hpp"
#include "potq/quantize.hpp"
#include "potq/tensor.hpp"

namespace potq {

// Dense double-precision matrix for the calibration math.
struct DMat {
    size_t rows = 0, cols = 0;
    std::vector<double> v;

    DMat() = default;
    DMat(size_t r, size_t c) : rows(r), cols(c), v(r * c, 0.0) {}
    double& at(size_t r, size_t c) { return v[r * cols + c]; }
    double at(size_t r, size_t c) const { return v[r * cols + c]; }
};

DMat dmat_from(const Tensor& t);  // 2-D tensors only
DMat matmul(const DMat& a, const DMat& b);

enum class GradMode {
    DetachExponent,  // d(W~)/d(S^) = P * 2^E with E held constant per step
    LiteralSte,      // literal STE reading: the term cancels unless E clamped
};

struct CalibConfig {
    double learning_rate = 1e-3;
    double weight_decay = 0.1;  // lambda in the Q2 regularizer
    int epochs = 10;            // 10 for 3-bit, 40 for 2-bit
    int batch_rows = 32;        // linear mode rows per gradient step; 0 = all
    GradMode grad_mode = GradMode::DetachExponent;

    void validate() const;
};

// Learnable per-(group, column) residual on the scale grid; the adjusted
// scale is S * (1 + gamma). Projection after each update keeps 1 + gamma
// positive.
struct GammaResidual {
    GroupLayout layout;
    std::vector<double> values;  // scale-grid order, initialized to 0
};

GammaResidual make_gamma(const GroupLayout& layout);

// S * (1 + gamma) per scale slot, S decoded from FP16 bits. Throws if any
// adjusted scale is not positive.
std::vector<double> adjust_scales(std::span<const uint16_t> scale_bits,
                                  const GammaResidual& gamma);

// Fresh exponents and reconstruction from adjusted scales (codes are not
// frozen across steps; they are recomputed from whatever scales come in).
struct Requantized {
    std::vector<double> w_tilde;   // rows x cols, row-major
    std::vector<uint8_t> exponents;
    std::vector<int8_t> signs;     // sign(w) with sign(0) = +1
    std::vector<uint8_t> clamped;  // 1 where round(log2|w|/s) fell outside [0, q_max]
};

Requantized requantize(const DMat& w, const GroupLayout& layout,
                       std::span<const double> s_hat, int q_max);

// Single-head transformer block: attention projections plus a 2-layer GELU
// MLP, all d x d.
struct BlockWeights {
    uint32_t dim = 0;
    DMat wq, wk, wv, w1, w2;
};

// Split a (5d) x d stack [W_Q; W_K; W_V; W_1; W_2] into block weights.
BlockWeights split_block_weights(const DMat& stacked);

// F(W, X) = MLP(X + Attn(X)) with softmax(Q K^T / sqrt(d)) attention and
// exact-erf GELU. X is B x T x d (a 2-D T x d input is one sequence).
Tensor block_forward(const BlockWeights& w, const Tensor& x);

// Double-precision forward of one T x d sequence (what calibration runs on;
// the tensor overload above converts to f32 on the way out).
DMat block_forward_d(const BlockWeights& w, const DMat& x);

// Plain X * W.
Tensor linear_forward(const Tensor& w, const Tensor& x);

struct Q2Parts {
    double data = 0.0;
    double reg = 0.0;
    double total = 0.0;
};

// ||F(W, X) - F(W~(gamma), X)||_F^2 + (lambda/2) ||gamma||_F^2, the raw sum
// form. The calibration loop optimizes the data term per calibration row;
// see calibrate_linear.
Q2Parts loss_q2_linear(const Tensor& w, const QuantizedMatrix& q,
                       const GammaResidual& gamma, const Tensor& x, double lambda);
Q2Parts loss_q2_block(const Tensor& stacked_w, const QuantizedMatrix& q,
                      const GammaResidual& gamma, const Tensor& x, double lambda);

// dQ2/dgamma for the raw sum-form loss, one entry per scale slot.
std::vector<double> grad_gamma_linear(const Tensor& w, const QuantizedMatrix& q,
                                      const GammaResidual& gamma, const Tensor& x,
                                      double lambda, GradMode mode);
std::vector<double> grad_gamma_block(const Tensor& stacked_w, const QuantizedMatrix& q,
                                     const GammaResidual& gamma, const Tensor& x,
                                     double lambda, GradMode mode);

struct CalibEpochStat {
    int epoch = 0;       // 1-based
    double loss = 0.0;   // data_term + reg_term
    double data_term = 0.0;  // mean squared output error per calibration row
    double reg_term = 0.0;   // (lambda/2) * sum gamma^2
};

struct CalibResult {
    GammaResidual gamma;
    std::vector<uint16_t> refined_scale_bits;  // encode(S * (1 + gamma))
    std::vector<uint32_t> refined_code_words;  // requantized at the refined scales
    double initial_loss = 0.0, initial_data = 0.0, initial_reg = 0.0;
    std::vector<CalibEpochStat> epochs;  // one entry per epoch, evaluated after it
};

// Plain gradient descent on gamma: Gamma <- Gamma - eta * grad(Q2_batch),
// codes requantized every step, loss evaluated over the full calibration
// set after each epoch. Throws if the loss goes non-finite.
CalibResult calibrate_linear(const Tensor& w, const QuantizedMatrix& q,
                             const Tensor& calib, const CalibConfig& cfg);

// Same for a stacked (5d) x d block; calib is B x T x d and each sequence is
// one batch. Requires d % group_size == 0 so groups stay within one slot.
CalibResult calibrate_block(const Tensor& stacked_w, const QuantizedMatrix& q,
                            const Tensor& calib, const CalibConfig& cfg);

// Apply a calibration result to a quantized matrix (scales + fresh codes).
QuantizedMatrix apply_calibration(const QuantizedMatrix& q, const CalibResult& result);

}  // namespace potq
