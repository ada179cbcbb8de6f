#include "potq/quantize.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "potq/check.hpp"
#include "potq/parallel.hpp"

namespace potq {

void QuantConfig::validate() const {
    check(bits >= 2 && bits <= 4, "unsupported bit-width (want 2..4)");
    check(group_size >= 1, "group size must be >= 1");
    check(grid_step > 0.0, "grid step must be positive");
    check(grid_count >= 1, "grid count must be >= 1");
}

int compute_exponent(double w_abs, double s, int q_max) {
    check(s > 0.0, "scale must be positive");
    if (w_abs == 0.0) return 0;  // log2(0) = -inf clamps to 0
    const double r = std::round(std::log2(w_abs / s));
    if (r <= 0.0) return 0;
    if (r >= double(q_max)) return q_max;
    return static_cast<int>(r);
}

double reconstruct(double s, int sign, int e) { return std::ldexp(s, e) * sign; }

double group_loss(std::span<const float> w_group, double s, int q_max) {
    double acc = 0.0;
    for (float wf : w_group) {
        const double w = wf;
        const int sign = w < 0.0 ? -1 : 1;
        const int e = compute_exponent(std::fabs(w), s, q_max);
        const double err = w - reconstruct(s, sign, e);
        acc += err * err;
    }
    return acc;
}

uint16_t scale_to_fp16(double s, int q_max) {
    check(s > 0.0, "scale must be positive");
    uint16_t bits = fp16::encode(s);
    if (bits < fp16::kMinNormal) bits = fp16::kMinNormal;
    check(fp16::is_normal_positive(bits) &&
              fp16::exponent_field(bits) + uint32_t(q_max) <= 30u,
          "group scale exceeds the FP16 range usable by the kernel");
    return bits;
}

GroupScaleResult search_group_scale(std::span<const float> w_group, const QuantConfig& cfg) {
    cfg.validate();
    check(!w_group.empty(), "group must be non-empty");
    const int qmax = cfg.q_max();

    double max_abs = 0.0;
    for (float v : w_group) max_abs = std::max(max_abs, std::fabs(double(v)));

    GroupScaleResult r;
    if (max_abs == 0.0) {
        // s0 would be zero; Q1(b) = len * (s0*b)^2 is increasing in b in the
        // s0 -> 0 limit, so the smallest candidate stands in for b*.
        r.b_star = cfg.grid_step;
        r.scale_bits = fp16::kMinNormal;
        r.q1 = group_loss(w_group, fp16::decode(fp16::kMinNormal), qmax);
        r.q1_search = r.q1;
        return r;
    }

    const double s0 = max_abs / double((1 << qmax) - 1);
    double best_q1 = std::numeric_limits<double>::infinity();
    double best_b = 0.0;
    for (int i = 1; i <= cfg.grid_count; ++i) {
        const double b = cfg.grid_step * i;
        const double q1 = group_loss(w_group, s0 * b, qmax);
        if (q1 < best_q1) {
            best_q1 = q1;
            best_b = b;
        }
    }
    r.b_star = best_b;
    r.q1_search = best_q1;
    r.scale_bits = scale_to_fp16(s0 * best_b, qmax);
    r.q1 = group_loss(w_group, fp16::decode(r.scale_bits), qmax);
    return r;
}

namespace {

Step1Result quantize_impl(const Tensor& w, const QuantConfig& cfg, int threads,
                          bool skip_search) {
    cfg.validate();
    check(w.is_2d(), "quantize: weights must be a 2-D tensor");
    for (float v : w.data) check(std::isfinite(v), "quantize: weights must be finite");

    const GroupLayout layout = layout_for(w, cfg.group_size);
    const int qmax = cfg.q_max();

    Step1Result out;
    out.q.layout = layout;
    out.q.bits = cfg.bits;
    out.q.scale_bits.assign(layout.scale_count(), 0);
    out.q.code_words.assign(uint64_t(layout.cols) * out.q.words_per_col(), 0);
    out.b_star.assign(layout.scale_count(), 0.0);
    out.q1.assign(layout.scale_count(), 0.0);

    const uint32_t gpc = layout.groups_per_col();
    parallel_for(layout.cols, threads, [&](uint64_t j0, uint64_t j1) {
        std::vector<float> scratch(layout.group_size);
        std::vector<PotCode> col_codes(layout.rows);
        for (uint64_t j = j0; j < j1; ++j) {
            for (uint32_t g = 0; g < gpc; ++g) {
                const uint32_t base = layout.group_begin(g);
                const uint32_t len = layout.group_rows(g);
                for (uint32_t k = 0; k < len; ++k)
                    scratch[k] = w.at(base + k, uint32_t(j));
                const std::span<const float> grp(scratch.data(), len);

                GroupScaleResult r;
                if (skip_search) {
                    double max_abs = 0.0;
                    for (float v : grp) max_abs = std::max(max_abs, std::fabs(double(v)));
                    r.b_star = 1.0;
                    r.scale_bits = max_abs == 0.0
                                       ? fp16::kMinNormal
                                       : scale_to_fp16(max_abs / double((1 << qmax) - 1), qmax);
                    r.q1 = group_loss(grp, fp16::decode(r.scale_bits), qmax);
                    r.q1_search = r.q1;
                } else {
                    r = search_group_scale(grp, cfg);
                }

                const uint64_t slot = layout.scale_index(g, uint32_t(j));
                out.q.scale_bits[slot] = r.scale_bits;
                out.b_star[slot] = r.b_star;
                out.q1[slot] = r.q1;

                // Codes come from the rounded scale the kernel will see.
                const double s = fp16::decode(r.scale_bits);
                for (uint32_t k = 0; k < len; ++k) {
                    PotCode c;
                    c.sign = scratch[k] < 0.0f ? -1 : 1;
                    c.exponent = static_cast<uint8_t>(
                        compute_exponent(std::fabs(double(scratch[k])), s, qmax));
                    col_codes[base + k] = c;
                }
            }
            out.q.set_column_codes(uint32_t(j), col_codes);
        }
    });
    return out;
}

}  // namespace

Step1Result quantize_step1(const Tensor& w, const QuantConfig& cfg, int threads) {
    return quantize_impl(w, cfg, threads, /*skip_search=*/false);
}

Step1Result quantize_naive(const Tensor& w, const QuantConfig& cfg, int threads) {
    return quantize_impl(w, cfg, threads, /*skip_search=*/true);
}

UniformQuantized quantize_rtn_uniform(const Tensor& w, const QuantConfig& cfg) {
    cfg.validate();
    check(w.is_2d(), "quantize: weights must be a 2-D tensor");
    for (float v : w.data) check(std::isfinite(v), "quantize: weights must be finite");

    const GroupLayout layout = layout_for(w, cfg.group_size);
    const int levels = (1 << cfg.bits) - 1;

    UniformQuantized u;
    u.layout = layout;
    u.bits = cfg.bits;
    u.scales.assign(layout.scale_count(), 0.0f);
    u.zero_points.assign(layout.scale_count(), 0);
    u.codes.assign(uint64_t(layout.rows) * layout.cols, 0);

    for_each_group(w, layout, [&](uint32_t g, uint32_t j, std::span<const float> grp) {
        double lo = grp[0], hi = grp[0];
        for (float v : grp) {
            lo = std::min(lo, double(v));
            hi = std::max(hi, double(v));
        }
        const double s = hi == lo ? 1.0 : (hi - lo) / double(levels);
        const double zr = std::round(lo / s);  // ties away from zero
        check(std::fabs(zr) < 2147483648.0, "uniform zero-point out of range");
        const uint64_t slot = layout.scale_index(g, j);
        u.scales[slot] = static_cast<float>(s);
        u.zero_points[slot] = static_cast<int32_t>(zr);
        const uint32_t base = layout.group_begin(g);
        for (uint32_t k = 0; k < grp.size(); ++k) {
            double c = hi == lo ? 0.0 : std::round(double(grp[k]) / s) - zr;
            c = std::clamp(c, 0.0, double(levels));
            u.codes[uint64_t(base + k) * layout.cols + j] = static_cast<uint8_t>(c);
        }
    });
    return u;
}

}  // namespace potq
