#include "potq/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <vector>

#include "potq/check.hpp"
#include "potq/synth.hpp"

namespace potq {

namespace {

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    return v[v.size() / 2];
}

// Random quantized matrix with valid scales: exponent field in
// [1, 30 - q_max], random mantissa, random codes.
QuantizedMatrix random_quantized(const BenchConfig& cfg, Rng& rng) {
    QuantizedMatrix q;
    q.layout = GroupLayout{cfg.rows, cfg.cols, cfg.group_size};
    q.layout.validate();
    q.bits = cfg.bits;
    const uint32_t qmax = static_cast<uint32_t>(q.q_max());
    q.scale_bits.resize(q.layout.scale_count());
    for (uint16_t& s : q.scale_bits) {
        const uint16_t e = static_cast<uint16_t>(1 + rng.next() % (30 - qmax));
        const uint16_t m = static_cast<uint16_t>(rng.next() % 1024);
        s = fp16::compose(0, e, m);
    }
    q.code_words.assign(uint64_t(cfg.cols) * q.words_per_col(), 0);
    std::vector<PotCode> col(cfg.rows);
    for (uint32_t j = 0; j < cfg.cols; ++j) {
        for (uint32_t i = 0; i < cfg.rows; ++i) {
            col[i].sign = (rng.next() & 1) ? -1 : 1;
            col[i].exponent = static_cast<uint8_t>(rng.next() % (qmax + 1));
        }
        q.set_column_codes(j, col);
    }
    return q;
}

UniformQuantized random_uniform(const BenchConfig& cfg, Rng& rng) {
    UniformQuantized u;
    u.layout = GroupLayout{cfg.rows, cfg.cols, cfg.group_size};
    u.bits = cfg.bits;
    const uint32_t levels = (1u << cfg.bits) - 1u;
    u.scales.resize(u.layout.scale_count());
    u.zero_points.resize(u.layout.scale_count());
    for (size_t s = 0; s < u.scales.size(); ++s) {
        u.scales[s] = static_cast<float>(0.001 + rng.uniform());
        u.zero_points[s] = static_cast<int32_t>(rng.next() % (levels + 1));
    }
    u.codes.resize(uint64_t(cfg.rows) * cfg.cols);
    for (uint8_t& c : u.codes) c = static_cast<uint8_t>(rng.next() % (levels + 1));
    return u;
}

// Reference oracle: decode the scale, apply (-1)^S * 2^E in float, encode.
bool kernel_matches_reference(const QuantizedMatrix& q, std::span<const uint16_t> got) {
    for (uint32_t i = 0; i < q.layout.rows; ++i)
        for (uint32_t j = 0; j < q.layout.cols; ++j) {
            const PotCode c = q.code_at(i, j);
            const float ref =
                fp16::decode(q.scale_at(i, j)) * float(c.sign) * std::ldexp(1.0f, c.exponent);
            if (got[uint64_t(i) * q.layout.cols + j] != fp16::encode(ref)) return false;
        }
    return true;
}

template <typename Fn>
BenchPathResult time_path(uint64_t elems, int runs, Fn&& fn) {
    fn();  // warm-up
    std::vector<double> secs;
    secs.reserve(runs);
    for (int r = 0; r < runs; ++r) {
        const auto t0 = std::chrono::steady_clock::now();
        fn();
        const auto t1 = std::chrono::steady_clock::now();
        secs.push_back(std::chrono::duration<double>(t1 - t0).count());
    }
    BenchPathResult res;
    res.seconds = median(secs);
    res.elems_per_sec = double(elems) / res.seconds;
    res.gbps = res.elems_per_sec * 2.0 / 1e9;  // FP16 output bytes
    return res;
}

}  // namespace

BenchResult run_dequant_bench(const BenchConfig& cfg) {
    check(cfg.runs >= 1, "bench needs at least one run");
    Rng rng(cfg.seed);
    const QuantizedMatrix q = random_quantized(cfg, rng);
    const UniformQuantized u = random_uniform(cfg, rng);
    const uint64_t elems = uint64_t(cfg.rows) * cfg.cols;

    std::vector<uint16_t> out(elems);
    BenchResult res;

    dequant_matrix_bits(q, out, cfg.threads);
    res.correctness_ok = kernel_matches_reference(q, out);
    check(res.correctness_ok, "bench correctness gate failed: kernel != reference");

    res.pot = time_path(elems, cfg.runs, [&] { dequant_matrix_bits(q, out, cfg.threads); });
    res.uniform =
        time_path(elems, cfg.runs, [&] { dequant_uniform_bits(u, out, cfg.threads); });
    res.ratio = res.pot.elems_per_sec / res.uniform.elems_per_sec;
    return res;
}

}  // namespace potq
