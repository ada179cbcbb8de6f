#include "potq/calibrate.hpp"

#include <cmath>

#include "potq/check.hpp"

namespace potq {

namespace {

constexpr double kOnePlusGammaFloor = 1e-6;  // projection keeps 1 + gamma >= this
constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); }
double gelu_grad(double x) {
    return 0.5 * (1.0 + std::erf(x * kInvSqrt2)) + x * std::exp(-0.5 * x * x) * kInvSqrt2Pi;
}

DMat matmul_at(const DMat& a, const DMat& b) {  // a^T * b
    check(a.rows == b.rows, "matmul_at: shape mismatch");
    DMat out(a.cols, b.cols);
    for (size_t k = 0; k < a.rows; ++k)
        for (size_t i = 0; i < a.cols; ++i) {
            const double av = a.at(k, i);
            for (size_t j = 0; j < b.cols; ++j) out.at(i, j) += av * b.at(k, j);
        }
    return out;
}

DMat matmul_bt(const DMat& a, const DMat& b) {  // a * b^T
    check(a.cols == b.cols, "matmul_bt: shape mismatch");
    DMat out(a.rows, b.rows);
    for (size_t i = 0; i < a.rows; ++i)
        for (size_t j = 0; j < b.rows; ++j) {
            double acc = 0.0;
            for (size_t k = 0; k < a.cols; ++k) acc += a.at(i, k) * b.at(j, k);
            out.at(i, j) = acc;
        }
    return out;
}

std::vector<double> decode_scales(std::span<const uint16_t> scale_bits) {
    std::vector<double> s(scale_bits.size());
    for (size_t i = 0; i < scale_bits.size(); ++i)
        s[i] = static_cast<double>(fp16::decode(scale_bits[i]));
    return s;
}

}  // namespace

void CalibConfig::validate() const {
    check(learning_rate >= 0.0, "learning rate must be non-negative");
    check(weight_decay >= 0.0, "weight decay must be non-negative");
    check(epochs >= 0, "epochs must be non-negative");
    check(batch_rows >= 0, "batch rows must be non-negative");
}

DMat dmat_from(const Tensor& t) {
    check(t.is_2d(), "dmat_from: tensor must be 2-D");
    DMat m(t.rows(), t.cols());
    for (size_t i = 0; i < m.v.size(); ++i) m.v[i] = static_cast<double>(t.data[i]);
    return m;
}

DMat matmul(const DMat& a, const DMat& b) {
    check(a.cols == b.rows, "matmul: shape mismatch");
    DMat out(a.rows, b.cols);
    for (size_t i = 0; i < a.rows; ++i)
        for (size_t k = 0; k < a.cols; ++k) {
            const double av = a.at(i, k);
            for (size_t j = 0; j < b.cols; ++j) out.at(i, j) += av * b.at(k, j);
        }
    return out;
}

GammaResidual make_gamma(const GroupLayout& layout) {
    GammaResidual g;
    g.layout = layout;
    g.values.assign(layout.scale_count(), 0.0);
    return g;
}

std::vector<double> adjust_scales(std::span<const uint16_t> scale_bits,
                                  const GammaResidual& gamma) {
    check(scale_bits.size() == gamma.values.size(), "adjust_scales: shape mismatch");
    std::vector<double> s(scale_bits.size());
    for (size_t i = 0; i < scale_bits.size(); ++i) {
        s[i] = static_cast<double>(fp16::decode(scale_bits[i])) * (1.0 + gamma.values[i]);
        check(s[i] > 0.0, "adjusted scale must stay positive");
    }
    return s;
}

Requantized requantize(const DMat& w, const GroupLayout& layout,
                       std::span<const double> s_hat, int q_max) {
    check(w.rows == layout.rows && w.cols == layout.cols, "requantize: shape mismatch");
    check(s_hat.size() == layout.scale_count(), "requantize: scale count mismatch");
    Requantized out;
    const size_t n = w.v.size();
    out.w_tilde.resize(n);
    out.exponents.resize(n);
    out.signs.resize(n);
    out.clamped.resize(n);
    for (uint32_t i = 0; i < layout.rows; ++i) {
        const uint32_t g = layout.group_of_row(i);
        for (uint32_t j = 0; j < layout.cols; ++j) {
            const double s = s_hat[layout.scale_index(g, j)];
            check(s > 0.0, "requantize: scales must be positive");
            const size_t idx = size_t(i) * layout.cols + j;
            const double wv = w.v[idx];
            const double aw = std::fabs(wv);
            const int sign = wv < 0.0 ? -1 : 1;
            int e;
            bool clamped;
            if (aw == 0.0) {
                e = 0;
                clamped = true;
            } else {
                const double r = std::round(std::log2(aw / s));
                clamped = r < 0.0 || r > double(q_max);
                e = r <= 0.0 ? 0 : (r >= double(q_max) ? q_max : int(r));
            }
            out.exponents[idx] = static_cast<uint8_t>(e);
            out.signs[idx] = static_cast<int8_t>(sign);
            out.clamped[idx] = clamped ? 1 : 0;
            out.w_tilde[idx] = std::ldexp(s, e) * sign;
        }
    }
    return out;
}

BlockWeights split_block_weights(const DMat& stacked) {
    check(stacked.cols > 0 && stacked.rows == 5 * stacked.cols,
          "block weights must stack five d x d matrices");
    const size_t d = stacked.cols;
    BlockWeights w;
    w.dim = static_cast<uint32_t>(d);
    DMat* slots[5] = {&w.wq, &w.wk, &w.wv, &w.w1, &w.w2};
    for (int s = 0; s < 5; ++s) {
        *slots[s] = DMat(d, d);
        std::copy(stacked.v.begin() + s * d * d, stacked.v.begin() + (s + 1) * d * d,
                  slots[s]->v.begin());
    }
    return w;
}

namespace {

struct BlockCache {
    DMat q, k, v, attn, attn_out, resid, h, u;
};

void softmax_rows(DMat& m) {
    for (size_t i = 0; i < m.rows; ++i) {
        double mx = m.at(i, 0);
        for (size_t j = 1; j < m.cols; ++j) mx = std::max(mx, m.at(i, j));
        double sum = 0.0;
        for (size_t j = 0; j < m.cols; ++j) {
            const double e = std::exp(m.at(i, j) - mx);
            m.at(i, j) = e;
            sum += e;
        }
        for (size_t j = 0; j < m.cols; ++j) m.at(i, j) /= sum;
    }
}

DMat block_forward_seq(const BlockWeights& w, const DMat& x, BlockCache* cache) {
    check(x.cols == w.dim, "block forward: input width must equal the hidden dim");
    const double inv_sqrt_d = 1.0 / std::sqrt(double(w.dim));
    BlockCache local;
    BlockCache& c = cache ? *cache : local;
    c.q = matmul(x, w.wq);
    c.k = matmul(x, w.wk);
    c.v = matmul(x, w.wv);
    c.attn = matmul_bt(c.q, c.k);
    for (double& z : c.attn.v) z *= inv_sqrt_d;
    softmax_rows(c.attn);
    c.attn_out = matmul(c.attn, c.v);
    c.resid = x;
    for (size_t i = 0; i < c.resid.v.size(); ++i) c.resid.v[i] += c.attn_out.v[i];
    c.h = matmul(c.resid, w.w1);
    c.u = c.h;
    for (double& hv : c.u.v) hv = gelu(hv);
    DMat y = matmul(c.u, w.w2);
    for (double v : y.v) check(std::isfinite(v), "block forward produced a non-finite value");
    return y;
}

// Gradients of the five stacked weight slots given dL/dY.
DMat block_backward_seq(const BlockWeights& w, const DMat& x, const BlockCache& c,
                        const DMat& dy) {
    const size_t d = w.dim;
    const double inv_sqrt_d = 1.0 / std::sqrt(double(d));

    const DMat dw2 = matmul_at(c.u, dy);
    DMat du = matmul_bt(dy, w.w2);
    DMat dh = du;
    for (size_t i = 0; i < dh.v.size(); ++i) dh.v[i] *= gelu_grad(c.h.v[i]);
    const DMat dw1 = matmul_at(c.resid, dh);
    const DMat dresid = matmul_bt(dh, w.w1);

    const DMat& dout = dresid;  // residual add passes the gradient through
    DMat dattn = matmul_bt(dout, c.v);
    const DMat dv = matmul_at(c.attn, dout);

    // softmax backward per row: dZ = A o (dA - sum(dA o A))
    DMat dz(dattn.rows, dattn.cols);
    for (size_t i = 0; i < dattn.rows; ++i) {
        double dot = 0.0;
        for (size_t j = 0; j < dattn.cols; ++j) dot += dattn.at(i, j) * c.attn.at(i, j);
        for (size_t j = 0; j < dattn.cols; ++j)
            dz.at(i, j) = c.attn.at(i, j) * (dattn.at(i, j) - dot);
    }
    for (double& zv : dz.v) zv *= inv_sqrt_d;

    const DMat dq = matmul(dz, c.k);
    const DMat dk = matmul_at(dz, c.q);
    const DMat dwq = matmul_at(x, dq);
    const DMat dwk = matmul_at(x, dk);
    const DMat dwv = matmul_at(x, dv);

    DMat dstack(5 * d, d);
    const DMat* slots[5] = {&dwq, &dwk, &dwv, &dw1, &dw2};
    for (int s = 0; s < 5; ++s)
        std::copy(slots[s]->v.begin(), slots[s]->v.end(), dstack.v.begin() + s * d * d);
    return dstack;
}

// Per-element dW~/dgamma of the slot that owns it: S * P * 2^E in detach
// mode, the same only where the exponent clamped in literal mode.
std::vector<double> gamma_coefficients(const Requantized& rq, const GroupLayout& layout,
                                       std::span<const double> s_base, GradMode mode) {
    std::vector<double> coef(rq.w_tilde.size());
    for (uint32_t i = 0; i < layout.rows; ++i) {
        const uint32_t g = layout.group_of_row(i);
        for (uint32_t j = 0; j < layout.cols; ++j) {
            const size_t idx = size_t(i) * layout.cols + j;
            if (mode == GradMode::LiteralSte && !rq.clamped[idx]) {
                coef[idx] = 0.0;
                continue;
            }
            coef[idx] = std::ldexp(s_base[layout.scale_index(g, j)], rq.exponents[idx]) *
                        rq.signs[idx];
        }
    }
    return coef;
}

// Reduce an elementwise dL/dW~ into scale-grid slots and add the
// regularizer term. Accumulation order is fixed (rows ascending), so the
// result is identical across runs.
std::vector<double> reduce_to_gamma(const DMat& dw, const std::vector<double>& coef,
                                    const GroupLayout& layout, const GammaResidual& gamma,
                                    double lambda) {
    std::vector<double> grad(layout.scale_count(), 0.0);
    for (uint32_t i = 0; i < layout.rows; ++i) {
        const uint32_t g = layout.group_of_row(i);
        for (uint32_t j = 0; j < layout.cols; ++j) {
            const size_t idx = size_t(i) * layout.cols + j;
            grad[layout.scale_index(g, j)] += dw.v[idx] * coef[idx];
        }
    }
    for (size_t s = 0; s < grad.size(); ++s) grad[s] += lambda * gamma.values[s];
    return grad;
}

DMat dmat_of(const Requantized& rq, const GroupLayout& layout) {
    DMat m(layout.rows, layout.cols);
    m.v = rq.w_tilde;
    return m;
}

double sq_diff_sum(const DMat& a, const DMat& b) {
    double acc = 0.0;
    for (size_t i = 0; i < a.v.size(); ++i) {
        const double d = a.v[i] - b.v[i];
        acc += d * d;
    }
    return acc;
}

double reg_term(const GammaResidual& gamma, double lambda) {
    double acc = 0.0;
    for (double g : gamma.values) acc += g * g;
    return 0.5 * lambda * acc;
}

// Sequences of a B x T x d calibration tensor (2-D input = one sequence).
std::vector<DMat> split_sequences(const Tensor& x) {
    std::vector<DMat> seqs;
    if (x.is_2d()) {
        seqs.push_back(dmat_from(x));
        return seqs;
    }
    check(x.dims.size() == 3, "calibration input must be 2-D or 3-D");
    const size_t b = x.dims[0], t = x.dims[1], d = x.dims[2];
    for (size_t s = 0; s < b; ++s) {
        DMat m(t, d);
        std::copy(x.data.begin() + s * t * d, x.data.begin() + (s + 1) * t * d,
                  m.v.begin());
        seqs.push_back(std::move(m));
    }
    return seqs;
}

void project_gamma(GammaResidual& gamma) {
    for (double& g : gamma.values)
        if (1.0 + g < kOnePlusGammaFloor) g = kOnePlusGammaFloor - 1.0;
}

void check_linear_shapes(const Tensor& w, const QuantizedMatrix& q, const Tensor& x) {
    check(w.is_2d(), "weights must be 2-D");
    check(w.rows() == q.layout.rows && w.cols() == q.layout.cols,
          "weights do not match the quantized layout");
    check(x.is_2d(), "linear calibration input must be 2-D");
    check(x.cols() == w.rows(), "calibration input width must equal the weight rows");
}

void check_block_shapes(const Tensor& w, const QuantizedMatrix& q) {
    check(w.is_2d(), "weights must be 2-D");
    check(w.rows() == q.layout.rows && w.cols() == q.layout.cols,
          "weights do not match the quantized layout");
    check(w.cols() > 0 && w.rows() == 5 * w.cols(),
          "block weights must stack five d x d matrices");
    check(w.cols() % q.layout.group_size == 0,
          "block mode requires the group size to divide the block dimension");
}

}  // namespace

DMat block_forward_d(const BlockWeights& w, const DMat& x) {
    return block_forward_seq(w, x, nullptr);
}

Tensor block_forward(const BlockWeights& w, const Tensor& x) {
    const std::vector<DMat> seqs = split_sequences(x);
    std::vector<float> out;
    out.reserve(x.data.size());
    for (const DMat& seq : seqs) {
        const DMat y = block_forward_seq(w, seq, nullptr);
        for (double v : y.v) out.push_back(static_cast<float>(v));
    }
    return make_tensor(x.dims, std::move(out), DType::F32);
}

Tensor linear_forward(const Tensor& w, const Tensor& x) {
    check(w.is_2d() && x.is_2d(), "linear forward needs 2-D tensors");
    check(x.cols() == w.rows(), "linear forward: inner dimensions disagree");
    const DMat y = matmul(dmat_from(x), dmat_from(w));
    std::vector<float> out(y.v.size());
    for (size_t i = 0; i < y.v.size(); ++i) out[i] = static_cast<float>(y.v[i]);
    return make_tensor({x.rows(), w.cols()}, std::move(out), DType::F32);
}

Q2Parts loss_q2_linear(const Tensor& w, const QuantizedMatrix& q,
                       const GammaResidual& gamma, const Tensor& x, double lambda) {
    check_linear_shapes(w, q, x);
    const DMat wd = dmat_from(w);
    const DMat xd = dmat_from(x);
    const std::vector<double> s_hat = adjust_scales(q.scale_bits, gamma);
    const Requantized rq = requantize(wd, q.layout, s_hat, q.q_max());
    Q2Parts parts;
    parts.data = sq_diff_sum(matmul(xd, wd), matmul(xd, dmat_of(rq, q.layout)));
    parts.reg = reg_term(gamma, lambda);
    parts.total = parts.data + parts.reg;
    return parts;
}

Q2Parts loss_q2_block(const Tensor& stacked_w, const QuantizedMatrix& q,
                      const GammaResidual& gamma, const Tensor& x, double lambda) {
    check_block_shapes(stacked_w, q);
    const DMat wd = dmat_from(stacked_w);
    const BlockWeights orig = split_block_weights(wd);
    const std::vector<double> s_hat = adjust_scales(q.scale_bits, gamma);
    const Requantized rq = requantize(wd, q.layout, s_hat, q.q_max());
    const BlockWeights quant = split_block_weights(dmat_of(rq, q.layout));
    Q2Parts parts;
    for (const DMat& seq : split_sequences(x)) {
        const DMat y0 = block_forward_seq(orig, seq, nullptr);
        const DMat y = block_forward_seq(quant, seq, nullptr);
        parts.data += sq_diff_sum(y0, y);
    }
    parts.reg = reg_term(gamma, lambda);
    parts.total = parts.data + parts.reg;
    return parts;
}

std::vector<double> grad_gamma_linear(const Tensor& w, const QuantizedMatrix& q,
                                      const GammaResidual& gamma, const Tensor& x,
                                      double lambda, GradMode mode) {
    check_linear_shapes(w, q, x);
    const DMat wd = dmat_from(w);
    const DMat xd = dmat_from(x);
    const std::vector<double> s_base = decode_scales(q.scale_bits);
    const std::vector<double> s_hat = adjust_scales(q.scale_bits, gamma);
    const Requantized rq = requantize(wd, q.layout, s_hat, q.q_max());
    const DMat y0 = matmul(xd, wd);
    const DMat y = matmul(xd, dmat_of(rq, q.layout));
    DMat dy(y.rows, y.cols);
    for (size_t i = 0; i < y.v.size(); ++i) dy.v[i] = 2.0 * (y.v[i] - y0.v[i]);
    const DMat dw = matmul_at(xd, dy);
    return reduce_to_gamma(dw, gamma_coefficients(rq, q.layout, s_base, mode), q.layout,
                           gamma, lambda);
}

std::vector<double> grad_gamma_block(const Tensor& stacked_w, const QuantizedMatrix& q,
                                     const GammaResidual& gamma, const Tensor& x,
                                     double lambda, GradMode mode) {
    check_block_shapes(stacked_w, q);
    const DMat wd = dmat_from(stacked_w);
    const BlockWeights orig = split_block_weights(wd);
    const std::vector<double> s_base = decode_scales(q.scale_bits);
    const std::vector<double> s_hat = adjust_scales(q.scale_bits, gamma);
    const Requantized rq = requantize(wd, q.layout, s_hat, q.q_max());
    const BlockWeights quant = split_block_weights(dmat_of(rq, q.layout));

    DMat dw_total(q.layout.rows, q.layout.cols);
    for (const DMat& seq : split_sequences(x)) {
        const DMat y0 = block_forward_seq(orig, seq, nullptr);
        BlockCache cache;
        const DMat y = block_forward_seq(quant, seq, &cache);
        DMat dy(y.rows, y.cols);
        for (size_t i = 0; i < y.v.size(); ++i) dy.v[i] = 2.0 * (y.v[i] - y0.v[i]);
        const DMat dw = block_backward_seq(quant, seq, cache, dy);
        for (size_t i = 0; i < dw_total.v.size(); ++i) dw_total.v[i] += dw.v[i];
    }
    return reduce_to_gamma(dw_total, gamma_coefficients(rq, q.layout, s_base, mode),
                           q.layout, gamma, lambda);
}

namespace {

// Shared descent loop. step(gamma) performs one pass over all batches and
// returns nothing; eval() returns (data_per_row, reg).
template <typename StepFn, typename EvalFn>
CalibResult run_descent(const QuantizedMatrix& q, const DMat& wd, const CalibConfig& cfg,
                        StepFn&& step, EvalFn&& eval) {
    CalibResult res;
    res.gamma = make_gamma(q.layout);

    auto record = [&](int epoch) {
        const auto [data, reg] = eval(res.gamma);
        const double total = data + reg;
        if (epoch == 0) {
            res.initial_data = data;
            res.initial_reg = reg;
            res.initial_loss = total;
        } else {
            res.epochs.push_back(CalibEpochStat{epoch, total, data, reg});
        }
        check(std::isfinite(total), "calibration diverged: non-finite loss at epoch " +
                                        std::to_string(epoch));
    };

    record(0);
    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        step(res.gamma);
        record(epoch);
    }

    // Final scales and codes come from the FP16-rounded adjusted scales so
    // the written model is exactly what the kernel dequantizes.
    const std::vector<double> s_base = decode_scales(q.scale_bits);
    res.refined_scale_bits.resize(s_base.size());
    std::vector<double> s_rounded(s_base.size());
    for (size_t i = 0; i < s_base.size(); ++i) {
        res.refined_scale_bits[i] =
            scale_to_fp16(s_base[i] * (1.0 + res.gamma.values[i]), q.q_max());
        s_rounded[i] = static_cast<double>(fp16::decode(res.refined_scale_bits[i]));
    }
    const Requantized rq = requantize(wd, q.layout, s_rounded, q.q_max());
    QuantizedMatrix fresh;
    fresh.layout = q.layout;
    fresh.bits = q.bits;
    fresh.scale_bits = res.refined_scale_bits;
    fresh.code_words.assign(uint64_t(q.layout.cols) * q.words_per_col(), 0);
    std::vector<PotCode> col(q.layout.rows);
    for (uint32_t j = 0; j < q.layout.cols; ++j) {
        for (uint32_t i = 0; i < q.layout.rows; ++i) {
            const size_t idx = size_t(i) * q.layout.cols + j;
            col[i] = PotCode{rq.signs[idx], rq.exponents[idx]};
        }
        fresh.set_column_codes(j, col);
    }
    res.refined_code_words = std::move(fresh.code_words);
    return res;
}

}  // namespace

CalibResult calibrate_linear(const Tensor& w, const QuantizedMatrix& q,
                             const Tensor& calib, const CalibConfig& cfg) {
    cfg.validate();
    check_linear_shapes(w, q, calib);
    const DMat wd = dmat_from(w);
    const DMat xd = dmat_from(calib);
    const DMat y0 = matmul(xd, wd);
    const std::vector<double> s_base = decode_scales(q.scale_bits);
    const int qmax = q.q_max();
    const size_t total_rows = xd.rows;

    // Contiguous row ranges of the calibration matrix, one gradient step each.
    const size_t bs = cfg.batch_rows == 0 ? total_rows : size_t(cfg.batch_rows);
    std::vector<std::pair<size_t, size_t>> batches;
    for (size_t r = 0; r < total_rows; r += bs)
        batches.emplace_back(r, std::min(r + bs, total_rows));

    auto eval = [&](const GammaResidual& gamma) -> std::pair<double, double> {
        const std::vector<double> s_hat = adjust_scales(q.scale_bits, gamma);
        const Requantized rq = requantize(wd, q.layout, s_hat, qmax);
        const DMat y = matmul(xd, dmat_of(rq, q.layout));
        return {sq_diff_sum(y0, y) / double(total_rows),
                reg_term(gamma, cfg.weight_decay)};
    };

    auto step = [&](GammaResidual& gamma) {
        for (const auto& [r0, r1] : batches) {
            const size_t nb = r1 - r0;
            DMat xb(nb, xd.cols);
            std::copy(xd.v.begin() + r0 * xd.cols, xd.v.begin() + r1 * xd.cols,
                      xb.v.begin());
            const std::vector<double> s_hat = adjust_scales(q.scale_bits, gamma);
            const Requantized rq = requantize(wd, q.layout, s_hat, qmax);
            const DMat yb = matmul(xb, dmat_of(rq, q.layout));
            DMat dy(nb, yb.cols);
            for (size_t i = 0; i < yb.v.size(); ++i) {
                const double ref = y0.v[(r0 * y0.cols) + i];
                dy.v[i] = 2.0 * (yb.v[i] - ref) / double(nb);
            }
            const DMat dw = matmul_at(xb, dy);
            const std::vector<double> grad =
                reduce_to_gamma(dw, gamma_coefficients(rq, q.layout, s_base, cfg.grad_mode),
                                q.layout, gamma, cfg.weight_decay);
            for (size_t s = 0; s < gamma.values.size(); ++s)
                gamma.values[s] -= cfg.learning_rate * grad[s];
            project_gamma(gamma);
        }
    };

    return run_descent(q, wd, cfg, step, eval);
}

CalibResult calibrate_block(const Tensor& stacked_w, const QuantizedMatrix& q,
                            const Tensor& calib, const CalibConfig& cfg) {
    cfg.validate();
    check_block_shapes(stacked_w, q);
    const DMat wd = dmat_from(stacked_w);
    const BlockWeights orig = split_block_weights(wd);
    const std::vector<DMat> seqs = split_sequences(calib);
    for (const DMat& seq : seqs)
        check(seq.cols == orig.dim, "calibration width must equal the block dim");
    const std::vector<double> s_base = decode_scales(q.scale_bits);
    const int qmax = q.q_max();

    std::vector<DMat> y0;
    y0.reserve(seqs.size());
    size_t total_rows = 0;
    for (const DMat& seq : seqs) {
        y0.push_back(block_forward_seq(orig, seq, nullptr));
        total_rows += seq.rows;
    }

    auto eval = [&](const GammaResidual& gamma) -> std::pair<double, double> {
        const std::vector<double> s_hat = adjust_scales(q.scale_bits, gamma);
        const Requantized rq = requantize(wd, q.layout, s_hat, qmax);
        const BlockWeights quant = split_block_weights(dmat_of(rq, q.layout));
        double data = 0.0;
        for (size_t s = 0; s < seqs.size(); ++s)
            data += sq_diff_sum(y0[s], block_forward_seq(quant, seqs[s], nullptr));
        return {total_rows == 0 ? 0.0 : data / double(total_rows),
                reg_term(gamma, cfg.weight_decay)};
    };

    auto step = [&](GammaResidual& gamma) {
        for (size_t s = 0; s < seqs.size(); ++s) {
            const std::vector<double> s_hat = adjust_scales(q.scale_bits, gamma);
            const Requantized rq = requantize(wd, q.layout, s_hat, qmax);
            const BlockWeights quant = split_block_weights(dmat_of(rq, q.layout));
            BlockCache cache;
            const DMat y = block_forward_seq(quant, seqs[s], &cache);
            DMat dy(y.rows, y.cols);
            for (size_t i = 0; i < y.v.size(); ++i)
                dy.v[i] = 2.0 * (y.v[i] - y0[s].v[i]) / double(seqs[s].rows);
            const DMat dw = block_backward_seq(quant, seqs[s], cache, dy);
            const std::vector<double> grad =
                reduce_to_gamma(dw, gamma_coefficients(rq, q.layout, s_base, cfg.grad_mode),
                                q.layout, gamma, cfg.weight_decay);
            for (size_t g = 0; g < gamma.values.size(); ++g)
                gamma.values[g] -= cfg.learning_rate * grad[g];
            project_gamma(gamma);
        }
    };

    return run_descent(q, wd, cfg, step, eval);
}

QuantizedMatrix apply_calibration(const QuantizedMatrix& q, const CalibResult& result) {
    QuantizedMatrix out;
    out.layout = q.layout;
    out.bits = q.bits;
    out.scale_bits = result.refined_scale_bits;
    out.code_words = result.refined_code_words;
    out.validate();
    return out;
}

}  // namespace potq
